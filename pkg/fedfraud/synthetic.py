"""Synthetic bank-account-fraud style table for desk-scale runs.

Two class-conditional Gaussians over the numeric columns, class-dependent
categorical columns and blank cells, so every preprocessing stage has work to do.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from fedfraud.data_pipeline import (
    DEFAULT_ONE_HOT,
    FRAUD_COLUMN_ORDER,
    FRAUD_FLOAT_COLUMNS,
    TARGET_COLUMN,
    ColumnKind,
    DatasetSchema,
)
from fedfraud.errors import ConfigError
from fedfraud.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

NUMERIC_COLUMNS = tuple(c for c in FRAUD_COLUMN_ORDER if c != TARGET_COLUMN and c not in DEFAULT_ONE_HOT)

# (location, scale) of the legitimate class
COLUMN_SCALES: Dict[str, Tuple[float, float]] = {
    "income": (0.5, 0.2),
    "name_email_similarity": (0.5, 0.25),
    "prev_address_months_count": (60.0, 40.0),
    "current_address_months_count": (90.0, 60.0),
    "customer_age": (35.0, 12.0),
    "days_since_request": (5.0, 3.0),
    "intended_balcon_amount": (10.0, 20.0),
    "zip_count_4w": (1500.0, 900.0),
    "velocity_6h": (5000.0, 3000.0),
    "velocity_24h": (4500.0, 1500.0),
    "velocity_4w": (5000.0, 1000.0),
    "bank_branch_count_8w": (180.0, 120.0),
    "credit_risk_score": (130.0, 70.0),
    "proposed_credit_limit": (500.0, 400.0),
    "session_length_in_minutes": (7.0, 8.0),
}
DEFAULT_SCALE = (50.0, 15.0)

CATEGORY_LEVELS: Dict[str, Tuple[str, ...]] = {
    "payment_type": ("AA", "AB", "AC"),
    "employment_status": ("CA", "CB", "CC"),
    "housing_status": ("BA", "BB", "BC"),
    "source": ("INTERNET", "TELEAPP"),
    "device_os": ("linux", "windows", "other"),
}

# Class separation in units of the column scale.
FLOAT_SHIFT = 1.0
INTEGER_SHIFT = 1.5


def _columns(d: int, n_categorical: int):
    if not 1 <= d <= len(NUMERIC_COLUMNS):
        raise ConfigError(f"d must lie in [1, {len(NUMERIC_COLUMNS)}], got {d}")
    if not 0 <= n_categorical <= len(DEFAULT_ONE_HOT):
        raise ConfigError(f"n_categorical must lie in [0, {len(DEFAULT_ONE_HOT)}]")
    chosen = set(NUMERIC_COLUMNS[:d]) | set(DEFAULT_ONE_HOT[:n_categorical])
    return [TARGET_COLUMN] + [c for c in FRAUD_COLUMN_ORDER if c in chosen]


def generate_synthetic(n: int, d: int, fraud_rate: float, seed: int, n_categorical: int = 2,
                       missing_rate: float = 0.02) -> Tuple[pd.DataFrame, DatasetSchema]:
    """``n`` rows with ``d`` numeric feature columns; label 1 with probability ``fraud_rate``."""
    if n < 2:
        raise ConfigError("n must be >= 2")
    if not 0 < fraud_rate < 1:
        raise ConfigError("fraud_rate must lie strictly between 0 and 1")
    if not 0 <= missing_rate < 1:
        raise ConfigError("missing_rate must lie in [0, 1)")
    columns = _columns(d, n_categorical)
    schema = DatasetSchema.from_header(columns)
    kinds = schema.kinds

    labels = (make_rng(derive_seed(seed, "labels")).random(n) < fraud_rate).astype(np.int64)
    fraud = labels == 1
    data = {TARGET_COLUMN: pd.array(labels, dtype="Int64")}
    for name in columns[1:]:
        rng = make_rng(derive_seed(seed, "column", name))
        if name in CATEGORY_LEVELS:
            levels = CATEGORY_LEVELS[name]
            legit_p = np.linspace(len(levels), 1, len(levels))
            legit_p /= legit_p.sum()
            draws = np.where(fraud, rng.choice(len(levels), size=n, p=legit_p[::-1]),
                             rng.choice(len(levels), size=n, p=legit_p))
            values = pd.Series(np.asarray(levels, dtype=object)[draws], dtype=object)
        else:
            loc, scale = COLUMN_SCALES.get(name, DEFAULT_SCALE)
            is_float = name in FRAUD_FLOAT_COLUMNS
            shift = (FLOAT_SHIFT if is_float else INTEGER_SHIFT) * rng.choice([-1.0, 1.0])
            raw = loc + scale * (rng.standard_normal(n) + shift * fraud)
            if is_float:
                values = pd.Series(raw, dtype=np.float64)
            else:
                values = pd.Series(np.rint(raw).astype(np.int64), dtype="Int64")
        if missing_rate > 0:
            missing = rng.random(n) < missing_rate
            if kinds[name] == ColumnKind.CATEGORICAL:
                values[missing] = None
            elif kinds[name] == ColumnKind.FLOAT:
                values[missing] = np.nan
            else:
                values[missing] = pd.NA
        data[name] = values

    frame = pd.DataFrame(data, columns=columns)
    logger.info("Generated %d rows (%d fraud) with %d columns", n, int(fraud.sum()), len(columns))
    return frame, schema


def write_synthetic(frame: pd.DataFrame, schema: DatasetSchema, csv_path: Union[str, Path],
                    schema_path: Optional[Union[str, Path]] = None) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False, na_rep="", float_format="%.10g")
    if schema_path is not None:
        schema.save(schema_path)
    return csv_path
