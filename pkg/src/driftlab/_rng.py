"""Seeded, splittable counter-based random streams."""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.Generator | None


def make_rng(seed: SeedLike = 0) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed`` (generators pass through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = 0
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one root seed."""
    children = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def seed_of(rng: SeedLike) -> int | None:
    return int(rng) if isinstance(rng, (int, np.integer)) else None
