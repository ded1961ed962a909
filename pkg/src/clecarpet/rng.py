"""Deterministic random streams.

Every stream is a :class:`numpy.random.Generator` driven by the Philox-4x64
counter-based bit generator (10 rounds, numpy's default Philox), keyed by a
:class:`numpy.random.SeedSequence`.  Child streams are derived with
``SeedSequence.spawn`` or by appending an integer path to the entropy, so a
replica's stream depends only on the master seed and its index, never on the
worker that happens to run it.
"""
from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "child_seed", "child_rng", "derived_seed", "RNG_ALGORITHM"]

RNG_ALGORITHM = "numpy.random.Philox (Philox-4x64-10) keyed by SeedSequence"

MASK64 = (1 << 64) - 1


def _seed_sequence(seed, *path: int) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        if not path:
            return seed
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(path))
    return np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(int(p) for p in path))


def make_rng(seed, *path: int) -> np.random.Generator:
    """Generator for ``seed`` (int or SeedSequence), optionally at a child path."""
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, *path)))


def child_seed(seed, *path: int) -> np.random.SeedSequence:
    return _seed_sequence(seed, *path)


def child_rng(rng_or_seed, index: int) -> np.random.Generator:
    """Independent child stream number ``index``.

    Passing a Generator derives the child from the generator's own seed
    sequence, so it is still a pure function of (master seed, index).
    """
    if isinstance(rng_or_seed, np.random.Generator):
        seq = rng_or_seed.bit_generator.seed_seq
        return make_rng(seq, index)
    return make_rng(rng_or_seed, index)


def derived_seed(seed, *path: int) -> int:
    """A 64-bit integer seed for the child at ``path`` (for configs that store ints)."""
    return int(_seed_sequence(seed, *path).generate_state(1, np.uint64)[0])
