"""Named random sub-streams derived from one global seed.

Every stage (data, mask, model-init, training, ...) pulls its randomness from
``substream(seed, name)`` so that changing the amount of randomness one stage
consumes never perturbs another.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name), *map(int, extra)])


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name, *extra))


def torch_seed(seed: int, name: str, *extra: int) -> int:
    return int(seed_sequence(seed, name, *extra).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int, name: str, *extra: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(torch_seed(seed, name, *extra))
    return gen


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic-kernel execution for reproducibility checks."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)
