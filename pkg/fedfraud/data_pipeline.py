#!/usr/bin/env python3
"""
fedfraud Data Pipeline
Ingests the tabular fraud dataset and applies the preprocessing chain:
imputation, IQR outlier removal, income binning, one-hot encoding,
standardization, correlation analysis, train/test split, client sharding
and SMOTE rebalancing.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError
from sklearn.neighbors import NearestNeighbors

from fedfraud.errors import ConfigError, EmptyDatasetError, ParseError, PipelineError, SchemaError
from fedfraud.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

TARGET_COLUMN = "fraud_bool"
BIN_COLUMN = "income"
DEFAULT_ONE_HOT = ("payment_type", "employment_status", "housing_status", "source", "device_os")
DEFAULT_MISSING_TOKENS = ("", "NA")
DATASET_FORMAT = "fedfraud.dataset"

# Column layout of the public bank-account fraud table (32 columns).
FRAUD_FLOAT_COLUMNS = (
    "income", "name_email_similarity", "days_since_request", "intended_balcon_amount",
    "velocity_6h", "velocity_24h", "velocity_4w", "session_length_in_minutes",
    "proposed_credit_limit", "device_distinct_emails_8w",
)
FRAUD_INTEGER_COLUMNS = (
    "fraud_bool", "prev_address_months_count", "current_address_months_count", "customer_age",
    "zip_count_4w", "bank_branch_count_8w", "date_of_birth_distinct_emails_4w",
    "credit_risk_score", "email_is_free", "phone_home_valid", "phone_mobile_valid",
    "bank_months_count", "has_other_cards", "foreign_request", "keep_alive_session",
    "device_fraud_count", "month",
)
FRAUD_COLUMN_ORDER = (
    "fraud_bool", "income", "name_email_similarity", "prev_address_months_count",
    "current_address_months_count", "customer_age", "days_since_request",
    "intended_balcon_amount", "payment_type", "zip_count_4w", "velocity_6h", "velocity_24h",
    "velocity_4w", "bank_branch_count_8w", "date_of_birth_distinct_emails_4w",
    "employment_status", "credit_risk_score", "email_is_free", "housing_status",
    "phone_home_valid", "phone_mobile_valid", "bank_months_count", "has_other_cards",
    "proposed_credit_limit", "foreign_request", "source", "session_length_in_minutes",
    "device_os", "keep_alive_session", "device_distinct_emails_8w", "device_fraud_count", "month",
)


class ColumnKind(str, Enum):
    INTEGER = "integer"
    FLOAT = "float"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class DatasetSchema:
    """Expected column names and kinds; ``target`` must be an integer 0/1 column."""
    columns: Tuple[Tuple[str, ColumnKind], ...]
    target: str = TARGET_COLUMN

    def __post_init__(self):
        columns = tuple((name, ColumnKind(kind)) for name, kind in self.columns)
        object.__setattr__(self, "columns", columns)
        names = [name for name, _ in columns]
        if len(set(names)) != len(names):
            raise SchemaError("schema has duplicate column names")
        kinds = dict(columns)
        if self.target not in kinds:
            raise SchemaError(f"target column '{self.target}' is not in the schema")
        if kinds[self.target] != ColumnKind.INTEGER:
            raise SchemaError(f"target column '{self.target}' must be of integer kind")

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.columns]

    @property
    def kinds(self) -> Dict[str, ColumnKind]:
        return dict(self.columns)

    @classmethod
    def fraud_default(cls) -> "DatasetSchema":
        return cls.from_header(FRAUD_COLUMN_ORDER)

    @classmethod
    def from_header(cls, header: Sequence[str], categorical: Iterable[str] = DEFAULT_ONE_HOT,
                    floats: Iterable[str] = FRAUD_FLOAT_COLUMNS,
                    target: str = TARGET_COLUMN) -> "DatasetSchema":
        """Finalize a schema from an actual file header.

        Named categorical and float columns get those kinds; every other
        column is integer.
        """
        categorical, floats = set(categorical), set(floats)
        columns = []
        for name in header:
            if name in categorical:
                columns.append((name, ColumnKind.CATEGORICAL))
            elif name in floats:
                columns.append((name, ColumnKind.FLOAT))
            else:
                columns.append((name, ColumnKind.INTEGER))
        return cls(tuple(columns), target=target)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "target": self.target,
            "columns": [{"name": name, "kind": kind.value} for name, kind in self.columns],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSchema":
        try:
            columns = tuple((c["name"], ColumnKind(c["kind"])) for c in data["columns"])
            return cls(columns, target=data.get("target", TARGET_COLUMN))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"invalid schema document: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetSchema":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Schema file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class RawTable:
    """Typed table. Numeric columns are float64 with NaN as the missing marker;
    categorical columns hold strings with None as the missing marker."""
    frame: pd.DataFrame
    kinds: Dict[str, ColumnKind]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if list(self.frame.columns) != list(self.kinds):
            raise SchemaError("frame columns and kinds disagree")

    @property
    def row_count(self) -> int:
        return len(self.frame)

    @property
    def column_names(self) -> List[str]:
        return list(self.frame.columns)

    def columns_of(self, kind: ColumnKind) -> List[str]:
        return [name for name, k in self.kinds.items() if k == kind]

    def numeric_columns(self) -> List[str]:
        return [name for name, k in self.kinds.items() if k != ColumnKind.CATEGORICAL]

    def derive(self, frame: pd.DataFrame, kinds: Optional[Dict[str, ColumnKind]] = None,
               **metadata) -> "RawTable":
        """New table over ``frame`` with metadata merged on top of this one's."""
        merged = dict(self.metadata)
        merged.update(metadata)
        return RawTable(frame.reset_index(drop=True), dict(kinds or self.kinds), merged)

    def take(self, indices: Sequence[int]) -> "RawTable":
        return self.derive(self.frame.iloc[list(indices)])

    @classmethod
    def from_columns(cls, columns: Dict[str, Tuple[ColumnKind, Sequence[Any]]]) -> "RawTable":
        """Build a table from ``{name: (kind, values)}``; None marks missing."""
        data, kinds = {}, {}
        for name, (kind, values) in columns.items():
            kind = ColumnKind(kind)
            kinds[name] = kind
            if kind == ColumnKind.CATEGORICAL:
                data[name] = pd.Series([None if v is None else str(v) for v in values], dtype=object)
            else:
                data[name] = pd.Series([np.nan if v is None else float(v) for v in values], dtype=np.float64)
        lengths = {len(s) for s in data.values()}
        if len(lengths) > 1:
            raise SchemaError("all columns must have equal length")
        return cls(pd.DataFrame(data), kinds)


@dataclass(frozen=True)
class ProcessedDataset:
    """Numeric feature matrix with binary labels and the fitted transform metadata."""
    features: np.ndarray
    labels: np.ndarray
    feature_names: Tuple[str, ...]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.asarray(self.labels).reshape(-1)
        if features.ndim != 2:
            raise PipelineError(f"features must be a 2-D matrix, got shape {features.shape}")
        if labels.shape[0] != features.shape[0]:
            raise PipelineError("features and labels have different row counts")
        if len(self.feature_names) != features.shape[1]:
            raise PipelineError("feature_names length does not match feature count")
        if not np.all(np.isfinite(features)):
            raise PipelineError("features contain missing or non-finite values")
        if not np.all((labels == 0) | (labels == 1)):
            raise PipelineError("labels must be 0 or 1")
        features.setflags(write=False)
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> Dict[int, int]:
        return {0: int(np.sum(self.labels == 0)), 1: int(np.sum(self.labels == 1))}

    def subset(self, indices: Sequence[int]) -> "ProcessedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ProcessedDataset(self.features[idx], self.labels[idx], self.feature_names, dict(self.metadata))

    def with_rows(self, features: np.ndarray, labels: np.ndarray, **metadata) -> "ProcessedDataset":
        merged = dict(self.metadata)
        merged.update(metadata)
        return ProcessedDataset(features, labels, self.feature_names, merged)

    def column_means(self) -> np.ndarray:
        if self.n_samples == 0:
            raise EmptyDatasetError("cannot take column means of an empty dataset")
        return self.features.mean(axis=0)

    def to_table(self) -> RawTable:
        """Features plus the target as an all-numeric table (for correlation analysis)."""
        frame = pd.DataFrame(self.features, columns=list(self.feature_names))
        target = self.metadata.get("target", TARGET_COLUMN)
        frame[target] = self.labels.astype(np.float64)
        kinds = {name: ColumnKind.FLOAT for name in frame.columns}
        return RawTable(frame, kinds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": DATASET_FORMAT,
            "version": 1,
            "feature_names": list(self.feature_names),
            "n_rows": self.n_samples,
            "n_features": self.n_features,
            "values": self.features.reshape(-1).tolist(),
            "labels": self.labels.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProcessedDataset":
        if not isinstance(data, dict) or data.get("format") != DATASET_FORMAT:
            raise PipelineError("not a fedfraud dataset document")
        try:
            n_rows, n_features = int(data["n_rows"]), int(data["n_features"])
            values = np.asarray(data["values"], dtype=np.float64)
            if values.size != n_rows * n_features:
                raise PipelineError(f"dataset has {values.size} values for {n_rows}x{n_features}")
            return cls(values.reshape(n_rows, n_features), np.asarray(data["labels"], dtype=np.int64),
                       tuple(data["feature_names"]), dict(data.get("metadata") or {}))
        except (KeyError, TypeError, ValueError) as e:
            raise PipelineError(f"invalid dataset document: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProcessedDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except ValueError as e:
                raise PipelineError(f"cannot parse dataset file {path}: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    shard_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.shard_count < 1:
            raise ConfigError("shard_count must be >= 1")


SMOTE_MODES = ("per_shard", "pooled", "off")


@dataclass(frozen=True)
class PipelineConfig:
    """Preprocessing options. ``one_hot_columns=None`` encodes every categorical column."""
    missing_tokens: Tuple[str, ...] = DEFAULT_MISSING_TOKENS
    iqr_multiplier: float = 1.5
    n_bins: int = 10
    bin_column: Optional[str] = BIN_COLUMN
    one_hot_columns: Optional[Tuple[str, ...]] = None
    standardize: bool = True
    fit_on_train: bool = False
    smote_mode: str = "per_shard"
    k_neighbors: int = 5

    def __post_init__(self):
        object.__setattr__(self, "missing_tokens", tuple(self.missing_tokens))
        if self.one_hot_columns is not None:
            object.__setattr__(self, "one_hot_columns", tuple(self.one_hot_columns))
        if not (math.isfinite(self.iqr_multiplier) and self.iqr_multiplier > 0):
            raise ConfigError("iqr_multiplier must be finite and positive")
        if self.n_bins < 1:
            raise ConfigError("n_bins must be >= 1")
        if self.smote_mode not in SMOTE_MODES:
            raise ConfigError(f"smote_mode must be one of {SMOTE_MODES}")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# Ingestion

def load_csv(path: Union[str, Path], schema: DatasetSchema,
             missing_tokens: Sequence[str] = DEFAULT_MISSING_TOKENS) -> RawTable:
    """Read a comma-separated file with header and type it per ``schema``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Input file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except EmptyDataError as e:
        raise EmptyDatasetError(f"{path} is empty") from e

    header = [str(c).strip() for c in raw.columns]
    raw.columns = header
    missing = [name for name in schema.names if name not in header]
    unknown = [name for name in header if name not in schema.kinds]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")
    if unknown:
        raise SchemaError(f"unknown columns: {', '.join(unknown)}")
    if len(raw) == 0:
        raise EmptyDatasetError(f"{path} has a header but no data rows")

    tokens = set(missing_tokens)
    data = {}
    for name, kind in schema.columns:
        cells = raw[name].str.strip()
        is_missing = cells.isin(tokens)
        if kind == ColumnKind.CATEGORICAL:
            data[name] = cells.where(~is_missing, None).astype(object)
            continue
        parsed = pd.to_numeric(cells.where(~is_missing, None), errors="coerce").astype(np.float64)
        bad = (parsed.isna() & ~is_missing) | np.isinf(parsed)
        if kind == ColumnKind.INTEGER:
            bad |= parsed.notna() & ~np.isinf(parsed) & (parsed != np.floor(parsed))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(row + 1, name, raw[name].iloc[row], kind.value)
        data[name] = parsed

    table = RawTable(pd.DataFrame(data), schema.kinds, {"source": str(path), "target": schema.target})
    target = table.frame[schema.target]
    if target.isna().any() or not target.isin([0.0, 1.0]).all():
        raise SchemaError(f"target column '{schema.target}' must contain only 0 and 1")
    logger.info("Loaded %d rows x %d columns from %s", table.row_count, len(header), path)
    return table


# Stages

def _mode(values: pd.Series) -> str:
    counts = values.value_counts()
    best = counts.max()
    return sorted(str(v) for v in counts[counts == best].index)[0]


def fit_imputation(table: RawTable) -> Dict[str, Any]:
    """Column mean (numeric) or mode (categorical) for every column."""
    fills = {}
    for name, kind in table.kinds.items():
        present = table.frame[name].dropna()
        if len(present) == 0:
            raise PipelineError(f"column '{name}' has no non-missing values to impute from")
        if kind == ColumnKind.CATEGORICAL:
            fills[name] = _mode(present)
        else:
            fills[name] = float(present.mean())
    return fills


def impute(table: RawTable, fill_values: Optional[Dict[str, Any]] = None) -> RawTable:
    """Fill missing numeric cells with the column mean and categorical cells with the mode.

    Mode ties go to the lexicographically smallest value.
    """
    frame = table.frame.copy()
    if fill_values is None:
        columns_with_missing = [c for c in frame.columns if frame[c].isna().any()]
        for name in columns_with_missing:
            if frame[name].notna().sum() == 0:
                raise PipelineError(f"column '{name}' is entirely missing")
        fill_values = fit_imputation(table)
    for name in frame.columns:
        if frame[name].isna().any():
            if name not in fill_values:
                raise PipelineError(f"no imputation value for column '{name}'")
            if table.kinds[name] == ColumnKind.CATEGORICAL:
                frame[name] = frame[name].where(frame[name].notna(), fill_values[name]).astype(object)
            else:
                frame[name] = frame[name].fillna(fill_values[name])
    return table.derive(frame, imputation=dict(fill_values))


def iqr_fences(values: np.ndarray, multiplier: float = 1.5) -> Tuple[float, float]:
    """[Q1 - m*IQR, Q3 + m*IQR] with quantiles interpolated at (n-1)*q."""
    q1, q3 = np.quantile(values, [0.25, 0.75])
    iqr = q3 - q1
    return float(q1 - multiplier * iqr), float(q3 + multiplier * iqr)


def remove_outliers_iqr(table: RawTable, multiplier: float = 1.5) -> RawTable:
    """Drop rows where any float-kind column falls outside its IQR fences.

    Fences come from the pre-removal column. Columns with fewer than four
    non-missing values are skipped.
    """
    if not (math.isfinite(multiplier) and multiplier > 0):
        raise PipelineError("IQR multiplier must be finite and positive")
    keep = np.ones(table.row_count, dtype=bool)
    fences = {}
    for name in table.columns_of(ColumnKind.FLOAT):
        column = table.frame[name].to_numpy(dtype=np.float64)
        present = column[~np.isnan(column)]
        if len(present) < 4:
            logger.warning("Skipping IQR outlier check for '%s': only %d values", name, len(present))
            continue
        lo, hi = iqr_fences(present, multiplier)
        fences[name] = [lo, hi]
        keep &= np.isnan(column) | ((column >= lo) & (column <= hi))

    removed = int((~keep).sum())
    if removed:
        logger.info("IQR outlier removal dropped %d of %d rows", removed, table.row_count)
    return table.derive(table.frame[keep], iqr_fences=fences, retained_row_mask=keep.tolist())


def bin_edges(values: np.ndarray, n_bins: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0 or not np.all(np.isfinite(values)):
        raise PipelineError("binning requires finite, non-empty values")
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise PipelineError("cannot bin a constant column")
    return np.linspace(lo, hi, n_bins + 1)


def apply_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Equal-width labels 0..n_bins-1; the maximum falls in the last bin, values beyond the
    fitted range clip to the end bins."""
    values = np.asarray(values, dtype=np.float64)
    n_bins = len(edges) - 1
    lo, hi = edges[0], edges[-1]
    width = (hi - lo) / n_bins
    labels = np.floor((values - lo) / width).astype(np.int64)
    return np.clip(labels, 0, n_bins - 1)


def bin_column(values: np.ndarray, n_bins: int = 10) -> np.ndarray:
    return apply_bins(values, bin_edges(values, n_bins))


def one_hot(table: RawTable, columns: Sequence[str] = DEFAULT_ONE_HOT,
            vocabularies: Optional[Dict[str, List[str]]] = None) -> RawTable:
    """Replace each categorical column by ``<col>=<value>`` indicator columns.

    Vocabularies are sorted lexicographically. With fitted ``vocabularies``,
    unseen values encode as all zeros.
    """
    frame = table.frame
    kinds = dict(table.kinds)
    missing = [c for c in columns if c not in kinds]
    if missing:
        raise PipelineError(f"one-hot columns not in table: {', '.join(missing)}")
    fitted = dict(vocabularies or {})
    used = {}
    encoded_columns = list(table.metadata.get("one_hot_columns", []))
    new_data, new_kinds = {}, {}

    for name in frame.columns:
        if name not in columns:
            new_data[name] = frame[name]
            new_kinds[name] = kinds[name]
            continue
        if kinds[name] != ColumnKind.CATEGORICAL:
            raise PipelineError(f"column '{name}' is not categorical")
        values = frame[name].astype(object)
        vocab = fitted.get(name) or sorted({str(v) for v in values.dropna()})
        used[name] = list(vocab)
        for value in vocab:
            encoded = f"{name}={value}"
            new_data[encoded] = (values == value).astype(np.float64)
            new_kinds[encoded] = ColumnKind.INTEGER
            encoded_columns.append(encoded)

    merged_vocab = dict(table.metadata.get("vocabularies", {}))
    merged_vocab.update(used)
    return table.derive(pd.DataFrame(new_data, index=frame.index), new_kinds,
                        vocabularies=merged_vocab, one_hot_columns=encoded_columns)


@dataclass(frozen=True)
class CorrelationMatrix:
    names: Tuple[str, ...]
    values: np.ndarray

    def value(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.values, index=list(self.names), columns=list(self.names)).to_csv(
            path, float_format="%.17g")
        return path


def correlation_matrix(table: RawTable) -> CorrelationMatrix:
    """Pearson correlations between numeric columns; zero-variance columns are excluded."""
    eligible = []
    for name in table.numeric_columns():
        column = table.frame[name].to_numpy(dtype=np.float64)
        if np.isnan(column).any():
            raise PipelineError(f"column '{name}' has missing values; impute first")
        if np.var(column) == 0.0:
            logger.warning("Excluding zero-variance column '%s' from the correlation matrix", name)
            continue
        eligible.append(name)
    if len(eligible) < 2:
        raise PipelineError("correlation matrix needs at least two numeric columns with variance")

    matrix = np.corrcoef(table.frame[eligible].to_numpy(dtype=np.float64), rowvar=False)
    matrix = np.clip((matrix + matrix.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    return CorrelationMatrix(tuple(eligible), matrix)


# Preprocessor

class Preprocessor:
    """Fits preprocessing statistics once and applies them to any raw table.

    ``fit_transform`` is the full chain on one table:
    impute -> IQR removal -> bin income -> one-hot -> standardize -> assemble.
    ``transform`` reuses the fitted statistics and never drops rows.
    """

    def __init__(self, config: Optional[PipelineConfig] = None, target: str = TARGET_COLUMN):
        self.config = config or PipelineConfig()
        self.target = target
        self.state: Optional[Dict[str, Any]] = None

    def _one_hot_columns(self, table: RawTable) -> List[str]:
        if self.config.one_hot_columns is not None:
            return list(self.config.one_hot_columns)
        return table.columns_of(ColumnKind.CATEGORICAL)

    def _bin(self, table: RawTable, edges: Optional[np.ndarray]) -> Tuple[RawTable, Optional[np.ndarray]]:
        name = self.config.bin_column
        if name is None or name not in table.kinds:
            if name is not None:
                logger.warning("Bin column '%s' not present; skipping binning", name)
            return table, None
        values = table.frame[name].to_numpy(dtype=np.float64)
        if edges is None:
            edges = bin_edges(values, self.config.n_bins)
        frame = table.frame.copy()
        position = frame.columns.get_loc(name)
        binned = apply_bins(values, edges).astype(np.float64)
        frame = frame.drop(columns=[name])
        frame.insert(position, f"binned_{name}", binned)
        kinds = {}
        for column in frame.columns:
            kinds[column] = ColumnKind.INTEGER if column == f"binned_{name}" else table.kinds[column]
        return table.derive(frame, kinds, bin_edges={name: edges.tolist()}), edges

    def _assemble(self, table: RawTable, scaling: Optional[Dict[str, List[float]]]) -> ProcessedDataset:
        if self.target not in table.kinds:
            raise SchemaError(f"target column '{self.target}' missing")
        names = [c for c in table.column_names if c != self.target]
        leftover = [c for c in names if table.kinds[c] == ColumnKind.CATEGORICAL]
        if leftover:
            raise PipelineError(f"categorical columns left unencoded: {', '.join(leftover)}")
        features = table.frame[names].to_numpy(dtype=np.float64, copy=True)
        labels = table.frame[self.target].to_numpy(dtype=np.float64).astype(np.int64)

        if self.config.standardize:
            encoded = set(table.metadata.get("one_hot_columns", []))
            if scaling is None:
                scaling = {}
                for j, name in enumerate(names):
                    if name in encoded:
                        continue
                    std = float(features[:, j].std())
                    scaling[name] = [float(features[:, j].mean()), std if std > 0 else 1.0]
            for j, name in enumerate(names):
                if name in scaling:
                    mean, std = scaling[name]
                    features[:, j] = (features[:, j] - mean) / std
        metadata = dict(table.metadata)
        metadata["scaling"] = scaling or {}
        metadata["target"] = self.target
        return ProcessedDataset(features, labels, tuple(names), metadata)

    def fit_transform(self, raw: RawTable) -> ProcessedDataset:
        if raw.row_count == 0:
            raise EmptyDatasetError("cannot preprocess an empty table")
        table = impute(raw)
        table = remove_outliers_iqr(table, self.config.iqr_multiplier)
        if table.row_count == 0:
            raise EmptyDatasetError("no rows left after outlier removal")
        table, _ = self._bin(table, None)
        table = one_hot(table, self._one_hot_columns(table))
        dataset = self._assemble(table, None)
        self.state = {key: dataset.metadata.get(key) for key in
                      ("imputation", "iqr_fences", "bin_edges", "vocabularies", "scaling")}
        logger.info("Preprocessed %d rows into %d features", dataset.n_samples, dataset.n_features)
        return dataset

    def transform(self, raw: RawTable) -> ProcessedDataset:
        if self.state is None:
            raise PipelineError("Preprocessor.transform called before fit")
        table = impute(raw, self.state["imputation"])
        edges = None
        if self.state.get("bin_edges"):
            edges = np.asarray(next(iter(self.state["bin_edges"].values())), dtype=np.float64)
        table, _ = self._bin(table, edges)
        table = one_hot(table, self._one_hot_columns(table), self.state.get("vocabularies"))
        dataset = self._assemble(table, self.state.get("scaling") if self.config.standardize else None)
        return dataset.with_rows(dataset.features, dataset.labels, iqr_fences=self.state["iqr_fences"],
                                 retained_row_mask=[True] * dataset.n_samples)


def preprocess(raw: RawTable, config: Optional[PipelineConfig] = None) -> ProcessedDataset:
    return Preprocessor(config, target=raw.metadata.get("target", TARGET_COLUMN)).fit_transform(raw)


# Splitting and rebalancing

def _split_indices(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise PipelineError(f"need at least 2 rows to split, got {n}")
    order = make_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(fraction * n)), 1), n - 1)
    return order[:n_train], order[n_train:]


def train_test_split(dataset: ProcessedDataset, spec: SplitSpec) -> Tuple[ProcessedDataset, ProcessedDataset]:
    """Seeded shuffle; the first floor(fraction * n) rows train, the rest test."""
    train_idx, test_idx = _split_indices(dataset.n_samples, spec.train_fraction, spec.seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def shard(train: ProcessedDataset, k: int = 3, seed: int = 0) -> List[ProcessedDataset]:
    """Seeded shuffle then k contiguous chunks whose sizes differ by at most one."""
    if k < 1:
        raise PipelineError("shard count must be >= 1")
    if train.n_samples < k:
        raise PipelineError(f"cannot split {train.n_samples} rows into {k} shards")
    if k == 1:
        return [train]
    order = make_rng(seed).permutation(train.n_samples)
    return [train.subset(chunk) for chunk in np.array_split(order, k)]


def _minority_neighbors(minority: np.ndarray, k_eff: int) -> np.ndarray:
    """Indices of the k_eff nearest other minority rows for every minority row."""
    search = NearestNeighbors(n_neighbors=k_eff + 1, algorithm="brute").fit(minority)
    _, indices = search.kneighbors(minority)
    neighbors = np.empty((len(minority), k_eff), dtype=np.int64)
    for i, row in enumerate(indices):
        others = [j for j in row if j != i]
        neighbors[i] = others[:k_eff]
    return neighbors


def smote(features: np.ndarray, labels: np.ndarray, k_neighbors: int = 5,
          seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class to the majority count.

    Each synthetic row is x + u * (x_nn - x) for a uniformly chosen minority
    row x, one of its k_eff = min(k, n_min - 1) nearest minority neighbours
    x_nn and u ~ U[0, 1). Original rows come first, unchanged.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    counts = {c: int(np.sum(y == c)) for c in (0, 1)}
    if counts[0] == 0 or counts[1] == 0:
        raise PipelineError("SMOTE needs both classes present")
    if counts[0] == counts[1]:
        return x.copy(), y.copy()
    minority_label = 0 if counts[0] < counts[1] else 1
    minority = x[y == minority_label]
    n_min, n_new = len(minority), abs(counts[1] - counts[0])
    if n_min < 2:
        raise PipelineError("SMOTE needs at least 2 minority samples")

    k_eff = min(k_neighbors, n_min - 1)
    neighbors = _minority_neighbors(minority, k_eff)
    rng = make_rng(seed)
    base = rng.integers(0, n_min, size=n_new)
    choice = rng.integers(0, k_eff, size=n_new)
    gap = rng.random((n_new, 1))
    origin = minority[base]
    synthetic = origin + gap * (minority[neighbors[base, choice]] - origin)

    out_x = np.vstack([x, synthetic])
    out_y = np.concatenate([y, np.full(n_new, minority_label, dtype=np.int64)])
    return out_x, out_y


def smote_dataset(dataset: ProcessedDataset, k_neighbors: int = 5, seed: int = 0) -> ProcessedDataset:
    x, y = smote(dataset.features, dataset.labels, k_neighbors, seed)
    return dataset.with_rows(x, y, smote={"k_neighbors": k_neighbors, "synthetic_rows": len(y) - dataset.n_samples})


def build_client_shards(train: ProcessedDataset, shard_count: int, config: PipelineConfig,
                        seed: int) -> List[ProcessedDataset]:
    """Shard the training set and rebalance per ``config.smote_mode``."""
    def balance(dataset: ProcessedDataset, label) -> ProcessedDataset:
        counts = dataset.class_counts()
        if min(counts.values()) < 2:
            logger.warning("Skipping SMOTE for %s: class counts %s", label, counts)
            return dataset
        return smote_dataset(dataset, config.k_neighbors, derive_seed(seed, "smote", label))

    if config.smote_mode == "pooled":
        train = balance(train, "pooled")
    shards = shard(train, shard_count, derive_seed(seed, "shard"))
    if config.smote_mode == "per_shard":
        shards = [balance(s, i + 1) for i, s in enumerate(shards)]
    return shards


@dataclass
class FederatedData:
    """Everything cmd_preprocess writes: the processed table, split, shards, correlations."""
    processed: ProcessedDataset
    train: ProcessedDataset
    test: ProcessedDataset
    shards: List[ProcessedDataset]
    correlation: CorrelationMatrix


def prepare_federated_data(raw: RawTable, config: PipelineConfig, split: SplitSpec) -> FederatedData:
    """Preprocess, split, shard and rebalance.

    By default statistics are fitted on the whole table before splitting.
    With ``fit_on_train`` the raw rows are split first and the test rows
    are transformed with statistics fitted on the training rows.
    """
    target = raw.metadata.get("target", TARGET_COLUMN)
    split_seed = derive_seed(split.seed, "split")
    if config.fit_on_train:
        train_idx, test_idx = _split_indices(raw.row_count, split.train_fraction, split_seed)
        preprocessor = Preprocessor(config, target=target)
        train = preprocessor.fit_transform(raw.take(train_idx))
        test = preprocessor.transform(raw.take(test_idx))
        processed = train
    else:
        processed = Preprocessor(config, target=target).fit_transform(raw)
        train, test = train_test_split(processed, replace(split, seed=split_seed))

    shards = build_client_shards(train, split.shard_count, config, split.seed)
    correlation = correlation_matrix(processed.to_table())
    return FederatedData(processed, train, test, shards, correlation)
