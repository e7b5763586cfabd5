#!/usr/bin/env python3
"""
fedfraud Metrics
Confusion-matrix based binary classification metrics and per-round history.
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Union

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from fedfraud.errors import DimensionError, MetricsError
from fedfraud.nn_core import ModelParams, bce_loss, forward

if TYPE_CHECKING:
    from fedfraud.data_pipeline import ProcessedDataset

HISTORY_COLUMNS = ["round", "accuracy", "precision", "recall", "f1", "loss"]
UNIT_FIELDS = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with fraud (label 1) as the positive class."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsRecord:
    """Metrics of one round. Rates lie in [0, 1]; loss is finite and non-negative."""
    round: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float = 0.0

    def __post_init__(self):
        if self.round < 0:
            raise MetricsError(f"round must be >= 0, got {self.round}")
        for name in UNIT_FIELDS:
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise MetricsError(f"{name} must lie in [0, 1], got {value}")
        if not (math.isfinite(self.loss) and self.loss >= 0.0):
            raise MetricsError(f"loss must be finite and non-negative, got {self.loss}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsRecord":
        try:
            return cls(
                round=int(data["round"]),
                accuracy=float(data["accuracy"]),
                precision=float(data["precision"]),
                recall=float(data["recall"]),
                f1=float(data["f1"]),
                loss=float(data.get("loss", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MetricsError(f"invalid metrics record: {e}") from e


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Predicted positive iff p >= threshold."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape[0] != y.shape[0]:
        raise DimensionError(f"{p.shape[0]} probabilities but {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DimensionError("labels must be 0 or 1")
    if p.shape[0] == 0:
        return ConfusionMatrix()
    predicted = (p >= threshold).astype(np.int64)
    tn, fp, fn, tp = confusion_matrix(y.astype(np.int64), predicted, labels=[0, 1]).ravel()
    return ConfusionMatrix(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def derive(cm: ConfusionMatrix, round_index: int = 0, loss: float = 0.0) -> MetricsRecord:
    """Accuracy, precision, recall and F1 of a confusion matrix; 0/0 counts as 0."""
    if cm.total == 0:
        return MetricsRecord(round_index, 0.0, 0.0, 0.0, 0.0, loss)
    counts = [cm.tp, cm.fp, cm.fn, cm.tn]
    actual = np.repeat([1, 0, 1, 0], counts)
    predicted = np.repeat([1, 1, 0, 0], counts)
    precision, recall, f1, _ = precision_recall_fscore_support(
        actual, predicted, pos_label=1, average="binary", zero_division=0)
    return MetricsRecord(
        round=round_index,
        accuracy=float(accuracy_score(actual, predicted)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        loss=loss,
    )


def evaluate(params: ModelParams, dataset: "ProcessedDataset", round_index: int = 0,
             threshold: float = 0.5) -> MetricsRecord:
    """Metrics and mean BCE of ``params`` on a labelled dataset."""
    probabilities = forward(params, dataset.features)
    cm = confusion(probabilities, dataset.labels, threshold)
    return derive(cm, round_index, bce_loss(probabilities, dataset.labels))


def write_history_csv(path: Union[str, Path], history: List[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.to_dict() for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_history_csv(path: Union[str, Path]) -> List[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metrics history not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    return [MetricsRecord.from_dict(row) for row in frame.to_dict(orient="records")]
