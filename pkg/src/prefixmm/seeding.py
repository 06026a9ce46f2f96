"""Seed derivation: every random stream comes from one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit subsystem seed from ``(seed, name)``."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``; e.g. keys = (step, example)."""
    return np.random.default_rng(np.random.SeedSequence([derive_seed(seed, name), *map(int, keys)]))


def worker_streams(seed: int, name: str, workers: int) -> list[np.random.Generator]:
    """Disjoint deterministic streams for parallel loader workers."""
    children = np.random.SeedSequence(derive_seed(seed, name)).spawn(workers)
    return [np.random.default_rng(c) for c in children]
