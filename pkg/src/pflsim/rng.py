"""Seed derivation: every random stream is keyed by (seed, purpose, indices)."""

import hashlib

import numpy as np


def derive_seed(seed, *keys):
    h = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def derive_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
