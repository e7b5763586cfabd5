#!/usr/bin/env python3
"""
fedfraud Coordinator
Server-side federation state behind the HTTP layer: client registry,
update validation, synchronous aggregation and the session ledger.
"""

import logging
import threading
from dataclasses import asdict, replace
from datetime import datetime
from typing import Any, Dict, Optional

from config import LedgerManager, ServerConfig
from fedfraud.data_pipeline import ProcessedDataset
from fedfraud.errors import MetricsError, ParamsFormatError, UpdateRejected
from fedfraud.federation import (
    ClientState,
    ClientStatus,
    ClientUpdate,
    EarlyStopper,
    RoundState,
    aggregate,
    initial_model_config,
)
from fedfraud.metrics import MetricsRecord, evaluate
from fedfraud.nn_core import ModelParams, init_model, params_from_payload, params_to_payload

logger = logging.getLogger(__name__)

# Reason codes and the HTTP status each maps to.
REJECTION_STATUS = {
    "stale_round": 409,
    "round_mismatch": 409,
    "duplicate_submission": 409,
    "unregistered_client": 409,
    "registry_full": 409,
    "training_finished": 409,
    "shape_mismatch": 422,
    "nonfinite_params": 422,
    "invalid_sample_count": 422,
    "invalid_metrics": 422,
    "malformed_request": 400,
}


def reject(reason: str, detail: str = "") -> UpdateRejected:
    return UpdateRejected(reason, REJECTION_STATUS[reason], detail)


class Coordinator:
    """Holds the RoundState. Every public method runs under one lock, so
    aggregation happens exactly once per round whatever the request interleaving."""

    def __init__(self, config: ServerConfig, validation: ProcessedDataset,
                 ledger: Optional[LedgerManager] = None):
        self.config = config
        self.validation = validation
        self.federation = config.federation
        self.model_config = initial_model_config(self.federation, validation.n_features)
        self.state = RoundState(round=0, global_params=init_model(self.model_config), registry={})
        self.stopper = EarlyStopper(self.federation.patience, self.federation.min_delta)
        self.stop_reason: Optional[str] = None
        self.last_seen: Dict[str, str] = {}
        self.ledger = ledger
        self.session_id = None
        if ledger is not None:
            self.session_id = ledger.start_session(asdict(self.model_config), self.federation.to_dict())
        self._lock = threading.Lock()

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    def _touch(self, client_id: str):
        self.last_seen[client_id] = datetime.now().isoformat()

    def _set_status(self, client_id: str, status: ClientStatus):
        registry = dict(self.state.registry)
        registry[client_id] = registry[client_id].transition(status)
        self.state = replace(self.state, registry=registry)

    def register(self, client_id: str) -> Dict[str, Any]:
        """Register a client (idempotent) and hand out the shared configuration."""
        with self._lock:
            if client_id not in self.state.registry:
                if len(self.state.registry) >= self.federation.client_count:
                    raise reject("registry_full", f"{self.federation.client_count} clients already registered")
                registry = dict(self.state.registry)
                registry[client_id] = ClientState()
                self.state = replace(self.state, registry=registry)
                logger.info("Registered client %s (%d/%d)", client_id, len(registry), self.federation.client_count)
            self._touch(client_id)
            return {
                "client_id": client_id,
                "round": self.state.round,
                "client_count": self.federation.client_count,
                "model_config": asdict(self.model_config),
                "training": self.federation.training.to_dict(),
                "poll_interval": self.config.poll_interval,
            }

    def model(self, client_id: Optional[str] = None) -> Dict[str, Any]:
        """Current global params. A polling idle client that still owes this round's
        update is moved to ``training``."""
        with self._lock:
            if client_id is not None and client_id in self.state.registry:
                self._touch(client_id)
                submitted = any(u.client_id == client_id for u in self.state.pending)
                if (not self.finished and not submitted
                        and self.state.registry[client_id].status == ClientStatus.IDLE):
                    self._set_status(client_id, ClientStatus.TRAINING)
            return {
                "round": self.state.round,
                "status": "finished" if self.finished else "collecting",
                "model_config": asdict(self.model_config),
                "params": params_to_payload(self.state.global_params),
            }

    def submit(self, client_id: str, round_index: int, n_samples: int, params_payload: Dict[str, Any],
               local_metrics: Dict[str, Any]) -> Dict[str, Any]:
        """Validate and store one update; aggregate when all K are in."""
        with self._lock:
            state = self.state
            if self.finished:
                raise reject("training_finished", self.stop_reason)
            if client_id not in state.registry:
                raise reject("unregistered_client", client_id)
            self._touch(client_id)
            if round_index < state.round:
                raise reject("stale_round", f"round {round_index} < current {state.round}")
            if round_index > state.round:
                raise reject("round_mismatch", f"round {round_index} > current {state.round}")
            if any(u.client_id == client_id for u in state.pending):
                raise reject("duplicate_submission", f"{client_id} in round {round_index}")
            if n_samples < 1:
                raise reject("invalid_sample_count", str(n_samples))
            try:
                params = params_from_payload(params_payload, self.model_config)
            except ParamsFormatError as e:
                reason = e.reason if e.reason in ("shape_mismatch", "nonfinite_params") else "malformed_request"
                raise reject(reason, str(e)) from e
            try:
                metrics = MetricsRecord.from_dict(local_metrics)
            except MetricsError as e:
                raise reject("invalid_metrics", str(e)) from e
            if metrics.round != round_index:
                raise reject("invalid_metrics", f"metrics round {metrics.round} != update round {round_index}")

            update = ClientUpdate(client_id, round_index, params, n_samples, metrics)
            if state.registry[client_id].status == ClientStatus.IDLE:
                self._set_status(client_id, ClientStatus.TRAINING)
            self._set_status(client_id, ClientStatus.UPDATING)
            self.state = replace(self.state, pending=self.state.pending + (update,))
            if self.ledger is not None:
                self.ledger.record_update(self.session_id, round_index, client_id, n_samples,
                                          params_payload, update.local_metrics.to_dict())
            logger.info("Accepted update from %s for round %d (%d/%d)", client_id, round_index,
                        len(self.state.pending), self.federation.client_count)

            aggregated = False
            if len(self.state.pending) == self.federation.client_count:
                self._aggregate()
                aggregated = True
            return {
                "accepted": True,
                "round": round_index,
                "aggregated": aggregated,
                "current_round": self.state.round,
                "updates_total": self.state.updates_total,
            }

    def _aggregate(self):
        state = self.state
        new_global = aggregate(state.pending)
        record = evaluate(new_global, self.validation, state.round + 1)
        registry = {cid: entry.transition(ClientStatus.IDLE) if entry.status == ClientStatus.UPDATING else entry
                    for cid, entry in state.registry.items()}
        self.state = RoundState(
            round=state.round + 1,
            global_params=new_global,
            registry=registry,
            pending=(),
            updates_total=state.updates_total + len(state.pending),
            history=state.history + (record,),
        )
        if self.ledger is not None:
            self.ledger.record_aggregation(self.session_id, self.state.round, record.to_dict())
        logger.info("Aggregated round %d: accuracy %.4f f1 %.4f", self.state.round, record.accuracy, record.f1)
        if self.stopper.update(record.accuracy):
            self.stop_reason = "early_stop"
        elif self.state.round >= self.federation.max_rounds:
            self.stop_reason = "max_rounds"
        if self.finished:
            logger.info("Training finished after round %d (%s)", self.state.round, self.stop_reason)

    def status(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "round": self.state.round,
                "updates_total": self.state.updates_total,
                "finished": self.finished,
                "stop_reason": self.stop_reason,
                "clients": [
                    {
                        "id": cid,
                        "status": entry.status.value,
                        "last_transition": entry.last_transition,
                        "last_seen": self.last_seen.get(cid),
                    }
                    for cid, entry in sorted(self.state.registry.items())
                ],
            }

    def metrics(self) -> Dict[str, Any]:
        with self._lock:
            return {"history": [r.to_dict() for r in self.state.history]}

    def global_params(self) -> ModelParams:
        with self._lock:
            return self.state.global_params


def replay_session(ledger: LedgerManager, session_id: Optional[int] = None) -> ModelParams:
    """Re-aggregate a recorded session's updates round by round; returns the final global params."""
    session_id = session_id if session_id is not None else ledger.latest_session_id()
    rows = ledger.load_updates(session_id)
    if not rows:
        raise ValueError(f"session {session_id} has no recorded updates")
    rounds: Dict[int, list] = {}
    for row in rows:
        update = ClientUpdate(row["client_id"], row["round"], params_from_payload(row["params"]),
                              row["n_samples"], MetricsRecord.from_dict(row["local_metrics"]))
        rounds.setdefault(row["round"], []).append(update)
    final = None
    for round_index in sorted(rounds):
        final = aggregate(rounds[round_index])
    return final
