#!/usr/bin/env python3
"""
fedfraud Federation
Federated averaging: client-local updates, sample-weighted aggregation,
the synchronous round state machine and an in-process simulation.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from fedfraud.data_pipeline import ProcessedDataset
from fedfraud.errors import AggregationError, ClientFailure, ConfigError, EmptyDatasetError, ProtocolError
from fedfraud.metrics import MetricsRecord, evaluate
from fedfraud.nn_core import (
    ModelConfig,
    ModelParams,
    TrainingConfig,
    init_model,
    params_to_payload,
    train_local,
)
from fedfraud.seeding import client_round_seed, derive_seed

logger = logging.getLogger(__name__)


class ClientStatus(str, Enum):
    IDLE = "idle"
    TRAINING = "training"
    UPDATING = "updating"


_NEXT_STATUS = {
    ClientStatus.IDLE: ClientStatus.TRAINING,
    ClientStatus.TRAINING: ClientStatus.UPDATING,
    ClientStatus.UPDATING: ClientStatus.IDLE,
}


@dataclass(frozen=True)
class ClientState:
    """Registry entry: lifecycle status idle -> training -> updating -> idle."""
    status: ClientStatus = ClientStatus.IDLE
    last_transition: str = field(default_factory=lambda: datetime.now().isoformat())

    def transition(self, new_status: ClientStatus) -> "ClientState":
        new_status = ClientStatus(new_status)
        if _NEXT_STATUS[self.status] != new_status:
            raise ProtocolError("invalid_transition", f"{self.status.value} -> {new_status.value}")
        return ClientState(new_status)


@dataclass(frozen=True)
class ClientUpdate:
    """One client's contribution to a round: trained params, sample count and metrics.

    Carries no feature or label data.
    """
    client_id: str
    round: int
    params: ModelParams
    n_samples: int
    local_metrics: MetricsRecord

    def __post_init__(self):
        if self.n_samples < 1:
            raise AggregationError(f"n_samples must be >= 1, got {self.n_samples}")

    def to_payload(self) -> Dict[str, Any]:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "n_samples": self.n_samples,
            "params": params_to_payload(self.params),
            "local_metrics": self.local_metrics.to_dict(),
        }


@dataclass(frozen=True)
class FederationConfig:
    client_count: int = 3
    max_rounds: int = 30
    training: TrainingConfig = field(default_factory=TrainingConfig)
    patience: Optional[int] = 5
    min_delta: float = 1e-4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.training, dict):
            object.__setattr__(self, "training", TrainingConfig.from_dict(self.training))
        if self.client_count < 1:
            raise ConfigError("client_count must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 or null")
        if not (self.min_delta >= 0 and math.isfinite(self.min_delta)):
            raise ConfigError("min_delta must be a finite non-negative number")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def client_ids(self) -> List[str]:
        return [f"client-{i + 1}" for i in range(self.client_count)]


@dataclass(frozen=True)
class RoundState:
    """Coordinator view of the federation at round ``round``."""
    round: int
    global_params: ModelParams
    registry: Dict[str, ClientState]
    pending: Tuple[ClientUpdate, ...] = ()
    updates_total: int = 0
    history: Tuple[MetricsRecord, ...] = ()

    @classmethod
    def initial(cls, global_params: ModelParams, client_ids: Sequence[str]) -> "RoundState":
        return cls(round=0, global_params=global_params,
                   registry={cid: ClientState() for cid in client_ids})


class EarlyStopper:
    """Stops after ``patience`` consecutive rounds without ``min_delta`` accuracy gain."""

    def __init__(self, patience: Optional[int], min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.stale_rounds = 0

    def update(self, accuracy: float) -> bool:
        if accuracy > self.best + self.min_delta:
            self.best = accuracy
            self.stale_rounds = 0
        else:
            self.stale_rounds += 1
        return self.patience is not None and self.stale_rounds >= self.patience


def initial_model_config(cfg: FederationConfig, input_dim: int) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, seed=derive_seed(cfg.seed, "model"))


def local_update(global_params: ModelParams, shard: ProcessedDataset, cfg: TrainingConfig,
                 client_id: str, round_index: int) -> ClientUpdate:
    """Train from the global params on the client's shard (W^k_{t+1})."""
    if shard.n_samples == 0:
        raise EmptyDatasetError(f"client '{client_id}' has an empty shard")
    round_cfg = replace(cfg, shuffle_seed=client_round_seed(cfg.shuffle_seed, client_id, round_index))
    params, losses = train_local(global_params, shard, round_cfg)
    metrics = evaluate(params, shard, round_index)
    logger.debug("client %s round %d: %d samples, final loss %s", client_id, round_index,
                 shard.n_samples, losses[-1] if losses else None)
    return ClientUpdate(client_id, round_index, params, shard.n_samples, metrics)


def _validate_updates(updates: Sequence[ClientUpdate]) -> List[ClientUpdate]:
    if not updates:
        raise AggregationError("cannot aggregate an empty list of updates")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise AggregationError(f"updates span several rounds: {sorted(rounds)}")
    shapes = updates[0].params.shapes()
    if any(u.params.shapes() != shapes for u in updates):
        raise AggregationError("updates have mismatched parameter shapes")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate client ids in one round")
    return sorted(updates, key=lambda u: u.client_id)


def aggregation_weights(updates: Sequence[ClientUpdate]) -> List[float]:
    """n_k / n per update, in client_id order."""
    ordered = _validate_updates(updates)
    total = sum(u.n_samples for u in ordered)
    return [u.n_samples / total for u in ordered]


def aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Sample-weighted average of client params.

    Computed as W_ref + sum_k (n_k / n)(W^k - W_ref) over client_id order with
    W_ref the first update, so the result is independent of arrival order and
    single or identical updates come back exactly.
    """
    ordered = _validate_updates(updates)
    weights = aggregation_weights(ordered)
    reference = ordered[0].params.arrays()
    merged = []
    for i, ref in enumerate(reference):
        acc = np.zeros_like(ref)
        for weight, update in zip(weights, ordered):
            acc += weight * (update.params.arrays()[i] - ref)
        merged.append(ref + acc)
    return ModelParams.from_arrays(merged)


def run_round(state: RoundState, shards: Mapping[str, ProcessedDataset], cfg: FederationConfig,
              validation: ProcessedDataset) -> RoundState:
    """One synchronous FedAvg round. Any client failure aborts and leaves ``state`` untouched."""
    client_ids = sorted(state.registry)
    if sorted(shards) != client_ids:
        raise ConfigError(f"shards {sorted(shards)} do not match registered clients {client_ids}")
    if len(client_ids) != cfg.client_count:
        raise ConfigError(f"expected {cfg.client_count} clients, registry has {len(client_ids)}")
    registry = dict(state.registry)
    t = state.round

    def train(client_id: str) -> ClientUpdate:
        try:
            return local_update(state.global_params, shards[client_id], cfg.training, client_id, t)
        except Exception as e:
            raise ClientFailure(client_id, e) from e

    for cid in client_ids:
        registry[cid] = registry[cid].transition(ClientStatus.TRAINING)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            updates = list(pool.map(train, client_ids))
    else:
        updates = [train(cid) for cid in client_ids]
    for cid in client_ids:
        registry[cid] = registry[cid].transition(ClientStatus.UPDATING)

    new_global = aggregate(updates)
    record = evaluate(new_global, validation, t + 1)
    for cid in client_ids:
        registry[cid] = registry[cid].transition(ClientStatus.IDLE)
    logger.info("round %d: accuracy %.4f precision %.4f recall %.4f f1 %.4f",
                t + 1, record.accuracy, record.precision, record.recall, record.f1)
    return RoundState(
        round=t + 1,
        global_params=new_global,
        registry=registry,
        pending=(),
        updates_total=state.updates_total + len(updates),
        history=state.history + (record,),
    )


@dataclass
class SimulationReport:
    config: Dict[str, Any]
    history: List[MetricsRecord]
    final_params: ModelParams
    model_config: ModelConfig
    stop_reason: str
    updates_total: int

    @property
    def rounds_completed(self) -> int:
        return len(self.history)

    def to_dict(self, params_file: Optional[str] = None) -> Dict[str, Any]:
        return {
            "format": "fedfraud.simulation",
            "version": 1,
            "config": self.config,
            "model_config": asdict(self.model_config),
            "rounds_completed": self.rounds_completed,
            "updates_total": self.updates_total,
            "stop_reason": self.stop_reason,
            "history": [r.to_dict() for r in self.history],
            "final_params_file": params_file,
        }

    def save(self, path: Union[str, Path], params_file: Optional[str] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(params_file), f, indent=2)
        return path


def simulate(cfg: FederationConfig, train_shards: Sequence[ProcessedDataset], validation: ProcessedDataset,
             on_round: Optional[Callable[[RoundState], None]] = None) -> SimulationReport:
    """Run rounds in-process until ``max_rounds`` or early stop. Deterministic under ``cfg.seed``."""
    if len(train_shards) != cfg.client_count:
        raise ConfigError(f"expected {cfg.client_count} shards, got {len(train_shards)}")
    if validation.n_samples == 0 or any(s.n_samples == 0 for s in train_shards):
        raise EmptyDatasetError("shards and validation set must be non-empty")

    model_config = initial_model_config(cfg, validation.n_features)
    client_ids = cfg.client_ids()
    shards = dict(zip(client_ids, train_shards))
    state = RoundState.initial(init_model(model_config), client_ids)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
    stop_reason = "max_rounds"

    for _ in range(cfg.max_rounds):
        state = run_round(state, shards, cfg, validation)
        if on_round is not None:
            on_round(state)
        if stopper.update(state.history[-1].accuracy):
            stop_reason = "early_stop"
            logger.info("Early stop after round %d (best accuracy %.4f)", state.round, stopper.best)
            break

    return SimulationReport(
        config=cfg.to_dict(),
        history=list(state.history),
        final_params=state.global_params,
        model_config=model_config,
        stop_reason=stop_reason,
        updates_total=state.updates_total,
    )
