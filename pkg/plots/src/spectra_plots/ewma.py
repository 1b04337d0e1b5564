"""Exponentially weighted moving average smoothing."""
from __future__ import annotations

import numpy as np


def ewma(series, alpha: float = 0.99, init: float | None = None) -> np.ndarray:
    """Smooth a series: ``y[0] = x[0]`` (or ``init``-seeded), then
    ``y[t] = alpha * y[t-1] + (1 - alpha) * x[t]``.

    ``init`` carries the smoothed state across chunk boundaries, so feeding a
    series in pieces reproduces the whole-series result exactly.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("ewma needs a nonempty 1-D series")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("smoothing factor must be in [0, 1)")
    y = np.empty_like(x)
    prev = x[0] if init is None else alpha * init + (1.0 - alpha) * x[0]
    y[0] = prev
    for t in range(1, x.size):
        prev = alpha * prev + (1.0 - alpha) * x[t]
        y[t] = prev
    return y
