"""Counter-based seed derivation.

Every random stream is keyed by ``(master_seed, stage, member, purpose)`` so
streams never depend on scheduling order. Members trained in parallel draw
exactly what they would draw sequentially.
"""

from __future__ import annotations

import zlib

import numpy as np

_U64 = (1 << 64) - 1


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(master_seed: int, stage: str, member: int = 0, purpose: str = "") -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(master_seed) & _U64,
        spawn_key=(_tag(stage), int(member), _tag(purpose)),
    )


def derive_seed(master_seed: int, stage: str, member: int = 0, purpose: str = "") -> int:
    """A 64-bit integer seed for operations that take a plain ``seed`` argument."""
    state = seed_sequence(master_seed, stage, member, purpose).generate_state(1, dtype=np.uint64)
    return int(state[0])


def make_rng(master_seed: int, stage: str, member: int = 0, purpose: str = "") -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, stage, member, purpose)))
