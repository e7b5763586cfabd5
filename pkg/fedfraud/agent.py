#!/usr/bin/env python3
"""
fedfraud Client Agent
Client side of the federation as a standalone process: register, poll the
coordinator for the global model, train on the local shard, submit the update.
Only params, sample counts and metrics ever leave the process.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import httpx
import numpy as np

from config import AgentConfig
from fedfraud.data_pipeline import ProcessedDataset
from fedfraud.errors import ConnectivityError, ProtocolError
from fedfraud.federation import local_update
from fedfraud.metrics import MetricsRecord
from fedfraud.nn_core import ModelConfig, TrainingConfig, forward, load_params, params_from_payload

logger = logging.getLogger(__name__)

# step() outcomes
SUBMITTED = "submitted"
WAITING = "waiting"
STALE = "stale"
FINISHED = "finished"


@dataclass
class AgentReport:
    client_id: str
    rounds_participated: int
    last_round: Optional[int]
    last_local_metrics: Optional[MetricsRecord]
    stop_reason: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "client_id": self.client_id,
            "rounds_participated": self.rounds_participated,
            "last_round": self.last_round,
            "last_local_metrics": self.last_local_metrics.to_dict() if self.last_local_metrics else None,
            "stop_reason": self.stop_reason,
        }


class ClientAgent:
    """One federated client. The only state kept across rounds is the last round submitted."""

    def __init__(self, config: AgentConfig, client: Optional[httpx.Client] = None,
                 shard: Optional[ProcessedDataset] = None):
        self.config = config
        self.shard = shard if shard is not None else ProcessedDataset.load(config.shard_path)
        self.client = client or httpx.Client(base_url=config.server_url, timeout=config.timeout)
        self.model_config: Optional[ModelConfig] = None
        self.training: Optional[TrainingConfig] = None
        self.last_round: Optional[int] = None
        self.rounds_participated = 0
        self.last_metrics: Optional[MetricsRecord] = None
        self.finished = False

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        """Send a request, retrying transport failures ``max_retries`` times."""
        attempts = self.config.max_retries + 1
        for attempt in range(1, attempts + 1):
            try:
                return self.client.request(method, path, **kwargs)
            except httpx.TransportError as e:
                logger.warning("%s %s failed (attempt %d/%d): %s", method, path, attempt, attempts, e)
                if attempt < attempts:
                    time.sleep(self.config.retry_interval)
        raise ConnectivityError(
            f"coordinator at {self.config.server_url} unreachable after {attempts} attempts")

    @staticmethod
    def _rejection(response: httpx.Response) -> ProtocolError:
        try:
            body = response.json()
        except ValueError:
            body = {}
        reason = body.get("reason") or f"http_{response.status_code}"
        return ProtocolError(reason, body.get("message") or body.get("detail") or response.text)

    def register(self) -> Dict[str, Any]:
        response = self._request("POST", "/api/v1/register", json={"client_id": self.config.client_id})
        if response.status_code != 200:
            raise self._rejection(response)
        accepted = response.json()
        self.model_config = ModelConfig.from_dict(accepted["model_config"])
        self.training = TrainingConfig.from_dict(accepted["training"])
        if self.model_config.input_dim != self.shard.n_features:
            raise ProtocolError(
                "shape_mismatch",
                f"shard has {self.shard.n_features} features, coordinator expects {self.model_config.input_dim}")
        logger.info("Registered %s with coordinator (round %d)", self.config.client_id, accepted["round"])
        return accepted

    def step(self) -> str:
        """One poll: train and submit if the coordinator moved to a round not yet submitted."""
        if self.training is None:
            self.register()
        response = self._request("GET", "/api/v1/model", params={"client_id": self.config.client_id})
        if response.status_code != 200:
            raise self._rejection(response)
        model = response.json()
        if model["status"] == "finished":
            self.finished = True
            return FINISHED
        round_index = model["round"]
        if self.last_round is not None and round_index <= self.last_round:
            return WAITING

        global_params = params_from_payload(model["params"], self.model_config)
        update = local_update(global_params, self.shard, self.training, self.config.client_id, round_index)
        response = self._request("POST", "/api/v1/update", json=update.to_payload())
        if response.status_code == 200:
            self.last_round = round_index
            self.rounds_participated += 1
            self.last_metrics = update.local_metrics
            logger.info("%s submitted round %d (local accuracy %.4f)", self.config.client_id,
                        round_index, update.local_metrics.accuracy)
            return SUBMITTED

        rejection = self._rejection(response)
        if rejection.reason == "stale_round":
            logger.info("%s: round %d went stale, refetching", self.config.client_id, round_index)
            return STALE
        if rejection.reason == "training_finished":
            self.finished = True
            return FINISHED
        raise rejection

    def run(self) -> AgentReport:
        """Poll until the coordinator finishes or ``max_rounds`` rounds were submitted."""
        self.register()
        while True:
            outcome = self.step()
            if outcome == FINISHED:
                stop_reason = "training_finished"
                break
            if self.config.max_rounds is not None and self.rounds_participated >= self.config.max_rounds:
                stop_reason = "max_rounds"
                break
            if outcome in (WAITING, STALE):
                time.sleep(self.config.poll_interval)
        return self.report(stop_reason)

    def report(self, stop_reason: str) -> AgentReport:
        return AgentReport(
            client_id=self.config.client_id,
            rounds_participated=self.rounds_participated,
            last_round=self.last_round,
            last_local_metrics=self.last_metrics,
            stop_reason=stop_reason,
        )

    def close(self):
        self.client.close()


def run_agent(config: AgentConfig) -> AgentReport:
    agent = ClientAgent(config)
    try:
        return agent.run()
    finally:
        agent.close()


def predict(params_path: Union[str, Path], rows) -> np.ndarray:
    """Fraud probabilities for ``rows`` from a locally held params file."""
    return forward(load_params(params_path), rows)
