"""Deterministic parameter initializers (seeded numpy Generator throughout)."""

from __future__ import annotations

import numpy as np


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples rejected outside ``bound`` standard deviations.

    Resampling draws from the same generator, so results are a pure function
    of the generator state.
    """
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
