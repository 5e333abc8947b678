"""Deterministic random substreams.

Every random draw in romit descends from one integer root seed.  A substream
is addressed by a path of nonnegative integers, e.g. ``(experiment, circuit,
randomization)``; the same ``(seed, path)`` always yields the same stream, and
distinct paths yield statistically independent streams (numpy
``SeedSequence`` spawn keys).
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` (for handing to code that wants an int)."""
    return int(rng.integers(0, 2**63 - 1))
