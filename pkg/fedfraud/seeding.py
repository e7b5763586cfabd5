"""Seed fan-out: one global seed, fixed per-stage derivation."""

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(seed: int, *labels) -> int:
    """Derive a 64-bit seed from a parent seed and stage labels.

    The derivation hashes the decimal seed and labels, so it is stable across
    processes and Python versions (unlike ``hash()``).
    """
    digest = hashlib.sha256()
    digest.update(str(int(seed) & SEED_MASK).encode("ascii"))
    for label in labels:
        digest.update(b"\x1f")
        digest.update(str(label).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "big")


def client_round_seed(shuffle_seed: int, client_id: str, round_index: int) -> int:
    """Shuffle seed a client uses for its local training in a given round."""
    return derive_seed(shuffle_seed, "client", client_id, "round", round_index)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & SEED_MASK)
