"""Deterministic random-stream derivation.

Every stochastic draw in the package comes from a numpy Generator whose
seed is derived from a root seed plus a string path, so independent
streams (trajectory noise, reference noise, embedding perturbation, ...)
can be split without ever sharing state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *path: object) -> int:
    """Hash a root seed and a label path into a 64-bit substream seed."""
    h = hashlib.sha256()
    h.update(int(root).to_bytes(8, "little", signed=True))
    for part in path:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(root: int, *path: object) -> np.random.Generator:
    """Seeded generator for the substream identified by ``path``."""
    return np.random.default_rng(derive_seed(root, *path))


def normal_array(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Standard-normal float32 draw (float64 internally, cast once)."""
    return rng.standard_normal(shape).astype(np.float32)
