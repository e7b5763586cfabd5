"""Tests for aggregation, the round state machine and the in-process simulation."""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from fedfraud.errors import AggregationError, ClientFailure, ConfigError, ProtocolError
from fedfraud.federation import (
    ClientState,
    ClientStatus,
    ClientUpdate,
    EarlyStopper,
    FederationConfig,
    RoundState,
    aggregate,
    aggregation_weights,
    initial_model_config,
    local_update,
    run_round,
    simulate,
)
from fedfraud.metrics import MetricsRecord
from fedfraud.nn_core import ModelConfig, TrainingConfig, init_model, train_local
from fedfraud.seeding import client_round_seed

SMALL = ModelConfig(input_dim=2, hidden1=3, hidden2=2, seed=1)
NO_METRICS = MetricsRecord(round=0, accuracy=0.0, precision=0.0, recall=0.0, f1=0.0)


def filled(value):
    base = init_model(SMALL)
    return base.from_arrays([np.full_like(a, value) for a in base.arrays()])


def update(client_id, value, n_samples=10, round_index=0, params=None):
    return ClientUpdate(client_id, round_index, params or filled(value), n_samples, NO_METRICS)


# aggregation

def test_single_update_returns_exact_params():
    params = init_model(SMALL)
    merged = aggregate([update("client-1", 0, params=params)])
    assert merged.equals(params)


def test_equal_weights_average():
    merged = aggregate([update("a", 1.0), update("b", 3.0)])
    assert all(np.all(a == 2.0) for a in merged.arrays())


def test_sample_weighting():
    merged = aggregate([update("a", 0.0, n_samples=1), update("b", 4.0, n_samples=3)])
    assert all(np.all(a == 3.0) for a in merged.arrays())


def test_identical_updates_come_back_exactly():
    params = init_model(SMALL)
    merged = aggregate([update(c, 0, n_samples=n, params=params) for c, n in (("a", 7), ("b", 3), ("c", 11))])
    assert merged.equals(params)


def test_aggregation_independent_of_arrival_order():
    updates = [update("c", 0.3, 5), update("a", -1.7, 9), update("b", 2.2, 4)]
    forward_order = aggregate(updates)
    reversed_order = aggregate(list(reversed(updates)))
    assert forward_order.equals(reversed_order)


def test_weights_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        counts = rng.integers(1, 10_000, size=int(rng.integers(1, 8)))
        updates = [update(f"client-{i}", 0.0, int(n)) for i, n in enumerate(counts)]
        assert abs(sum(aggregation_weights(updates)) - 1.0) <= 1e-12


def test_aggregate_is_convex_combination():
    rng = np.random.default_rng(1)
    base = init_model(SMALL)
    updates = []
    for i in range(4):
        arrays = [rng.normal(size=a.shape) for a in base.arrays()]
        updates.append(update(f"client-{i}", 0, int(rng.integers(1, 50)), params=base.from_arrays(arrays)))
    merged = aggregate(updates)
    for i, array in enumerate(merged.arrays()):
        stacked = np.stack([u.params.arrays()[i] for u in updates])
        assert np.all(array >= stacked.min(axis=0) - 1e-12)
        assert np.all(array <= stacked.max(axis=0) + 1e-12)


def test_aggregate_rejects_bad_input():
    with pytest.raises(AggregationError):
        aggregate([])
    with pytest.raises(AggregationError):
        aggregate([update("a", 0.0, round_index=0), update("b", 0.0, round_index=1)])
    with pytest.raises(AggregationError):
        aggregate([update("a", 0.0), update("a", 1.0)])
    other = init_model(ModelConfig(input_dim=3, hidden1=3, hidden2=2))
    with pytest.raises(AggregationError):
        aggregate([update("a", 0.0), update("b", 0, params=other)])


def test_update_requires_samples():
    with pytest.raises(AggregationError):
        update("a", 0.0, n_samples=0)


def test_update_payload_carries_no_data(dataset_factory):
    shard = dataset_factory(n=30, d=2, seed=3)
    result = local_update(init_model(SMALL), shard, TrainingConfig(epochs=1), "client-1", 0)
    payload = result.to_payload()
    assert set(payload) == {"client_id", "round", "n_samples", "params", "local_metrics"}
    assert payload["n_samples"] == 30


# client lifecycle

def test_client_state_cycle():
    state = ClientState()
    assert state.status == ClientStatus.IDLE
    state = state.transition(ClientStatus.TRAINING)
    state = state.transition(ClientStatus.UPDATING)
    state = state.transition(ClientStatus.IDLE)
    assert state.status == ClientStatus.IDLE


def test_client_state_rejects_skips():
    with pytest.raises(ProtocolError):
        ClientState().transition(ClientStatus.UPDATING)
    with pytest.raises(ProtocolError):
        ClientState(ClientStatus.TRAINING).transition(ClientStatus.IDLE)


def test_early_stopper():
    stopper = EarlyStopper(patience=2, min_delta=0.01)
    assert not stopper.update(0.80)
    assert not stopper.update(0.805)
    assert stopper.update(0.809)
    assert stopper.best == 0.80


def test_early_stopper_disabled():
    stopper = EarlyStopper(patience=None, min_delta=0.0)
    assert not any(stopper.update(0.5) for _ in range(10))


def test_federation_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(client_count=0)
    with pytest.raises(ConfigError):
        FederationConfig(max_rounds=0)
    assert FederationConfig(client_count=2).client_ids() == ["client-1", "client-2"]


# rounds

def initial_state(cfg, validation):
    params = init_model(initial_model_config(cfg, validation.n_features))
    return RoundState.initial(params, cfg.client_ids())


def test_run_round_advances(federation_data, federation_config):
    shards, validation = federation_data
    state = initial_state(federation_config, validation)
    shard_map = dict(zip(federation_config.client_ids(), shards))
    after = run_round(state, shard_map, federation_config, validation)
    assert after.round == 1
    assert after.updates_total == 3
    assert len(after.history) == 1 and after.history[0].round == 1
    assert all(entry.status == ClientStatus.IDLE for entry in after.registry.values())
    assert state.round == 0 and state.updates_total == 0


def test_run_round_client_failure_leaves_state(federation_data, federation_config, dataset_factory):
    shards, validation = federation_data
    state = initial_state(federation_config, validation)
    wrong = dataset_factory(n=20, d=7)
    shard_map = dict(zip(federation_config.client_ids(), [shards[0], wrong, shards[2]]))
    with pytest.raises(ClientFailure) as exc:
        run_round(state, shard_map, federation_config, validation)
    assert exc.value.client_id == "client-2"
    assert state.round == 0


def test_run_round_parallel_matches_sequential(federation_data, federation_config):
    shards, validation = federation_data
    shard_map = dict(zip(federation_config.client_ids(), shards))
    sequential = run_round(initial_state(federation_config, validation), shard_map, federation_config, validation)
    parallel_cfg = replace(federation_config, workers=3)
    parallel = run_round(initial_state(parallel_cfg, validation), shard_map, parallel_cfg, validation)
    assert sequential.global_params.equals(parallel.global_params)


def test_single_client_matches_centralized_training(dataset_factory):
    shard = dataset_factory(n=64, d=4, seed=21)
    training = TrainingConfig(epochs=2, batch_size=8, learning_rate=0.01, shuffle_seed=5)
    cfg = FederationConfig(client_count=1, max_rounds=5, training=training, patience=None, seed=3)
    report = simulate(cfg, [shard], shard)

    params = init_model(initial_model_config(cfg, 4))
    for t in range(5):
        round_cfg = replace(training, shuffle_seed=client_round_seed(training.shuffle_seed, "client-1", t))
        params, _ = train_local(params, shard, round_cfg)
    assert report.final_params.equals(params)


# simulation

def test_simulate_is_deterministic(federation_data, federation_config):
    shards, validation = federation_data
    first = simulate(federation_config, shards, validation)
    second = simulate(federation_config, shards, validation)
    assert first.final_params.equals(second.final_params)
    assert first.history == second.history
    assert first.rounds_completed == 3
    assert first.updates_total == 9
    assert first.stop_reason == "max_rounds"


def test_simulate_single_round(federation_data, federation_config):
    shards, validation = federation_data
    report = simulate(replace(federation_config, max_rounds=1), shards, validation)
    assert len(report.history) == 1


def test_simulate_early_stop(federation_data, federation_config):
    shards, validation = federation_data
    cfg = replace(federation_config, max_rounds=20, patience=1, min_delta=1.0)
    report = simulate(cfg, shards, validation)
    assert report.stop_reason == "early_stop"
    assert report.rounds_completed == 2


def test_simulate_calls_on_round(federation_data, federation_config):
    shards, validation = federation_data
    seen = []
    simulate(federation_config, shards, validation, on_round=lambda state: seen.append(state.round))
    assert seen == [1, 2, 3]


def test_simulate_shard_count_must_match(federation_data, federation_config):
    shards, validation = federation_data
    with pytest.raises(ConfigError):
        simulate(federation_config, shards[:2], validation)


def test_simulation_report_document(tmp_path, federation_data, federation_config):
    shards, validation = federation_data
    report = simulate(replace(federation_config, max_rounds=1), shards, validation)
    document = report.to_dict("final_params.json")
    assert document["format"] == "fedfraud.simulation"
    assert document["rounds_completed"] == 1
    assert document["final_params_file"] == "final_params.json"
    assert report.save(tmp_path / "simulation.json").exists()


def test_federated_training_learns(federation_data):
    shards, validation = federation_data
    cfg = FederationConfig(
        client_count=3, max_rounds=8, patience=None, seed=2,
        training=TrainingConfig(epochs=2, batch_size=16, learning_rate=0.01, shuffle_seed=1),
    )
    report = simulate(cfg, shards, validation)
    assert report.history[-1].accuracy >= 0.8
    assert report.history[-1].loss < report.history[0].loss
