"""Shared test fixtures for fedfraud."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))


def make_dataset(n=120, d=4, seed=0, fraud_rate=0.3, shift=2.0):
    """Two-Gaussian labelled dataset, already numeric."""
    from fedfraud.data_pipeline import ProcessedDataset

    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < fraud_rate).astype(np.int64)
    labels[0], labels[1] = 0, 1
    features = rng.standard_normal((n, d)) + shift * labels[:, None] * np.linspace(1.0, -1.0, d)
    return ProcessedDataset(features, labels, tuple(f"f{j}" for j in range(d)))


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def federation_data():
    """Three client shards and a validation set."""
    shards = [make_dataset(n=60 + 5 * i, seed=10 + i) for i in range(3)]
    validation = make_dataset(n=80, seed=99)
    return shards, validation


@pytest.fixture
def federation_config():
    from fedfraud.federation import FederationConfig
    from fedfraud.nn_core import TrainingConfig

    return FederationConfig(
        client_count=3,
        max_rounds=3,
        training=TrainingConfig(epochs=1, batch_size=16, learning_rate=0.01, shuffle_seed=7),
        patience=None,
        seed=11,
    )


@pytest.fixture
def server_config(federation_config):
    from config import ServerConfig

    return ServerConfig(port=5000, federation=federation_config, ledger_path=None)


@pytest.fixture
def ledger(tmp_path):
    """Create a temporary session ledger."""
    from config import LedgerManager
    return LedgerManager(db_path=str(tmp_path / "ledger.db"))


@pytest.fixture
def synthetic_csv(tmp_path):
    """Small synthetic raw table on disk with its schema."""
    from fedfraud.synthetic import generate_synthetic, write_synthetic

    frame, schema = generate_synthetic(n=400, d=8, fraud_rate=0.2, seed=3)
    csv_path = write_synthetic(frame, schema, tmp_path / "raw.csv", tmp_path / "schema.json")
    return csv_path, schema
