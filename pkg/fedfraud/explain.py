#!/usr/bin/env python3
"""
fedfraud Explanations
Shapley feature attributions for the fraud model against a single baseline:
exact enumeration over all coalitions for small feature counts, permutation
sampling above that, and per-client reports.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import binom

from config import ExplainConfig
from fedfraud.data_pipeline import ProcessedDataset
from fedfraud.errors import ExplainError
from fedfraud.nn_core import ModelParams, forward
from fedfraud.reports import render
from fedfraud.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

EXACT_LIMIT = 15
EXHAUSTIVE_LIMIT = 8
EXACT_TOLERANCE = 1e-9
SAMPLED_SIGMAS = 4.0
# forward() rows per batch during enumeration and sampling
CHUNK_ROWS = 65536


@dataclass(frozen=True, eq=False)
class CoalitionSpec:
    """Instance x and baseline b over features N = {0..d-1}."""
    instance: np.ndarray
    baseline: np.ndarray
    feature_names: Tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.instance, dtype=np.float64).reshape(-1)
        b = np.asarray(self.baseline, dtype=np.float64).reshape(-1)
        if x.shape != b.shape:
            raise ExplainError(f"instance has {x.size} features but baseline has {b.size}")
        if x.size == 0:
            raise ExplainError("cannot explain an instance with no features")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(b))):
            raise ExplainError("instance and baseline must be finite")
        names = tuple(self.feature_names) or tuple(f"feature_{j}" for j in range(x.size))
        if len(names) != x.size:
            raise ExplainError("feature_names length does not match the instance")
        object.__setattr__(self, "instance", x)
        object.__setattr__(self, "baseline", b)
        object.__setattr__(self, "feature_names", names)

    @property
    def d(self) -> int:
        return self.instance.size

    def inputs(self, masks: np.ndarray) -> np.ndarray:
        """Rows taking x_j where the mask is set and b_j elsewhere."""
        return np.where(masks, self.instance, self.baseline)


@dataclass(frozen=True, eq=False)
class ShapExplanation:
    phi: np.ndarray
    baseline_value: float
    instance_value: float
    feature_names: Tuple[str, ...]
    feature_values: np.ndarray
    method: str
    n_permutations: Optional[int] = None
    std_error: Optional[np.ndarray] = None
    mean_prediction: Optional[float] = None
    label: Dict[str, Any] = field(default_factory=dict)

    @property
    def efficiency_gap(self) -> float:
        return float(np.sum(self.phi) - (self.instance_value - self.baseline_value))

    @property
    def tolerance(self) -> float:
        if self.method == "exact" or self.std_error is None:
            return EXACT_TOLERANCE
        return SAMPLED_SIGMAS * float(np.sqrt(np.sum(self.std_error ** 2))) + EXACT_TOLERANCE


def _predict(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    out = np.empty(inputs.shape[0], dtype=np.float64)
    for start in range(0, inputs.shape[0], CHUNK_ROWS):
        out[start:start + CHUNK_ROWS] = forward(model, inputs[start:start + CHUNK_ROWS])
    return out


def coalition_value(model: ModelParams, spec: CoalitionSpec, subset: Iterable[int]) -> float:
    """f(S): model output with x_j for j in S and b_j for the rest."""
    mask = np.zeros(spec.d, dtype=bool)
    for j in subset:
        if not 0 <= j < spec.d:
            raise ExplainError(f"feature index {j} out of range [0, {spec.d})")
        mask[j] = True
    return float(forward(model, spec.inputs(mask)[None, :])[0])


def coalition_masks(d: int) -> np.ndarray:
    """All 2^d coalitions; row s has feature j set iff bit j of s is set."""
    bits = np.arange(2 ** d)[:, None] >> np.arange(d)[None, :]
    return (bits & 1).astype(bool)


def shapley_from_values(values: np.ndarray) -> np.ndarray:
    """Exact Shapley values from a value function tabulated over bitmask coalitions.

    phi_j = sum over S not containing j of |S|!(d-|S|-1)!/d! * (v(S + j) - v(S)).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    d = int(round(math.log2(values.size))) if values.size else 0
    if values.size < 2 or 2 ** d != values.size:
        raise ExplainError(f"value table must have 2^d entries with d >= 1, got {values.size}")
    index = np.arange(values.size)
    sizes = coalition_masks(d).sum(axis=1)
    weights = 1.0 / (d * binom(d - 1, np.arange(d)))
    phi = np.empty(d, dtype=np.float64)
    for j in range(d):
        without = index[((index >> j) & 1) == 0]
        phi[j] = np.sum(weights[sizes[without]] * (values[without | (1 << j)] - values[without]))
    return phi


def shapley_exact(model: ModelParams, spec: CoalitionSpec, exact_limit: int = EXACT_LIMIT) -> ShapExplanation:
    """Exact Shapley values from one batched pass over all 2^d coalitions."""
    if spec.d > exact_limit:
        raise ExplainError(
            f"{spec.d} features exceed the exact limit of {exact_limit}; use the sampled method (--sampled)")
    values = _predict(model, spec.inputs(coalition_masks(spec.d)))
    return ShapExplanation(
        phi=shapley_from_values(values),
        baseline_value=float(values[0]),
        instance_value=float(values[-1]),
        feature_names=spec.feature_names,
        feature_values=spec.instance,
        method="exact",
    )


def _marginal_contributions(model: ModelParams, spec: CoalitionSpec, permutations: np.ndarray) -> np.ndarray:
    """Per permutation and feature j: f(pre + j) - f(pre), pre the features before j."""
    m, d = permutations.shape
    rank = np.empty_like(permutations)
    np.put_along_axis(rank, permutations, np.arange(d)[None, :].repeat(m, axis=0), axis=1)
    # masks[i, k, j]: feature j is among the first k of permutation i
    masks = rank[:, None, :] < np.arange(d + 1)[None, :, None]
    values = _predict(model, spec.inputs(masks.reshape(-1, d))).reshape(m, d + 1)
    after = np.take_along_axis(values, rank + 1, axis=1)
    before = np.take_along_axis(values, rank, axis=1)
    return after - before


def shapley_sampled(model: ModelParams, spec: CoalitionSpec, n_permutations: int = 2000, seed: int = 0,
                    exhaustive: bool = False) -> ShapExplanation:
    """Monte Carlo Shapley values over uniformly drawn feature permutations.

    With ``exhaustive`` every one of the d! permutations is used once instead,
    which reproduces the exact values.
    """
    d = spec.d
    if exhaustive:
        if d > EXHAUSTIVE_LIMIT:
            raise ExplainError(f"exhaustive enumeration is limited to {EXHAUSTIVE_LIMIT} features")
        permutations = np.array(list(itertools.permutations(range(d))), dtype=np.int64)
        n_permutations = permutations.shape[0]
    else:
        if n_permutations < 1:
            raise ExplainError("n_permutations must be >= 1")
        rng = make_rng(seed)
        permutations = rng.permuted(np.tile(np.arange(d, dtype=np.int64), (n_permutations, 1)), axis=1)

    per_chunk = max(1, CHUNK_ROWS // (d + 1))
    contributions = np.concatenate([
        _marginal_contributions(model, spec, permutations[start:start + per_chunk])
        for start in range(0, n_permutations, per_chunk)
    ])
    phi = contributions.mean(axis=0)
    if n_permutations > 1:
        std_error = contributions.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        std_error = np.zeros(d)
    ends = _predict(model, spec.inputs(np.array([np.zeros(d, bool), np.ones(d, bool)])))
    return ShapExplanation(
        phi=phi,
        baseline_value=float(ends[0]),
        instance_value=float(ends[1]),
        feature_names=spec.feature_names,
        feature_values=spec.instance,
        method="exhaustive" if exhaustive else "sampled",
        n_permutations=n_permutations,
        std_error=std_error,
    )


def _direction(phi: float) -> str:
    if phi > 0:
        return "increases"
    if phi < 0:
        return "decreases"
    return "none"


@dataclass
class ExplanationReport:
    rows: List[Dict[str, Any]]
    document: Dict[str, Any]
    text: str


def explanation_report(expl: ShapExplanation) -> ExplanationReport:
    """Rows sorted by |phi| descending with the sign rendered as a direction."""
    order = sorted(range(len(expl.phi)), key=lambda j: (-abs(float(expl.phi[j])), j))
    rows = []
    for j in order:
        row = {
            "feature": expl.feature_names[j],
            "value": float(expl.feature_values[j]),
            "phi": float(expl.phi[j]),
            "direction": _direction(float(expl.phi[j])),
        }
        if expl.std_error is not None:
            row["std_error"] = float(expl.std_error[j])
        rows.append(row)
    phi_sum = float(np.sum(expl.phi))
    difference = expl.instance_value - expl.baseline_value
    document = {
        "format": "fedfraud.explanation",
        "version": 1,
        "method": expl.method,
        "n_permutations": expl.n_permutations,
        "baseline_value": expl.baseline_value,
        "instance_value": expl.instance_value,
        "mean_prediction": expl.mean_prediction,
        "phi_sum": phi_sum,
        "efficiency_gap": expl.efficiency_gap,
        "tolerance": expl.tolerance,
        "reconciled": abs(expl.efficiency_gap) <= expl.tolerance,
        "moved": any(r["direction"] != "none" for r in rows),
        "label": dict(expl.label),
        "features": rows,
    }
    text = render("explanation.txt.j2", report=document, difference=difference)
    return ExplanationReport(rows=rows, document=document, text=text)


def global_importance(explanations: Sequence[ShapExplanation]) -> List[Tuple[str, float]]:
    """Features ranked by mean |phi| across explanations."""
    if not explanations:
        raise ExplainError("no explanations to summarize")
    names = explanations[0].feature_names
    if any(e.feature_names != names for e in explanations):
        raise ExplainError("explanations cover different feature sets")
    mean_abs = np.mean(np.abs(np.vstack([e.phi for e in explanations])), axis=0)
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], j))
    return [(names[j], float(mean_abs[j])) for j in order]


def explain(model: ModelParams, spec: CoalitionSpec, config: ExplainConfig, seed: Optional[int] = None) -> ShapExplanation:
    """Exact when ``config.sampled`` is off, permutation sampling otherwise."""
    if config.sampled:
        return shapley_sampled(model, spec, config.n_permutations, config.seed if seed is None else seed)
    return shapley_exact(model, spec, config.exact_limit)


def explain_clients(model: ModelParams, dataset: ProcessedDataset, rows: Sequence[int],
                    shards: Sequence[ProcessedDataset], config: ExplainConfig) -> List[ShapExplanation]:
    """Explain ``rows`` of ``dataset`` once per client shard, against that shard's feature means."""
    if not shards:
        raise ExplainError("at least one client shard is needed for a baseline")
    for r in rows:
        if not 0 <= r < dataset.n_samples:
            raise ExplainError(f"row {r} out of range for a dataset of {dataset.n_samples} rows")
    explanations = []
    for i, shard_data in enumerate(shards):
        if shard_data.feature_names != dataset.feature_names:
            raise ExplainError(f"shard {i + 1} does not share the dataset's feature columns")
        client_id = f"client-{i + 1}"
        baseline = shard_data.column_means()
        mean_prediction = float(np.mean(forward(model, shard_data.features)))
        for r in rows:
            spec = CoalitionSpec(dataset.features[r], baseline, dataset.feature_names)
            expl = explain(model, spec, config, derive_seed(config.seed, client_id, r))
            explanations.append(replace(
                expl,
                mean_prediction=mean_prediction,
                label={"client_id": client_id, "row": int(r), "label": int(dataset.labels[r])},
            ))
            logger.info("Explained row %d for %s (%s)", r, client_id, expl.method)
    return explanations
