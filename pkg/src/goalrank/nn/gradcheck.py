from __future__ import annotations

from typing import Callable

import numpy as np


def central_differences(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5,
                        coords: np.ndarray | None = None) -> np.ndarray:
    """Central finite-difference gradient of ``f`` at ``theta`` (optionally on a coordinate subset)."""
    theta = np.array(theta, dtype=np.float64)
    idx = np.arange(theta.size) if coords is None else np.asarray(coords)
    out = np.zeros(theta.size)
    for i in idx:
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a-b| / max(max|a|, max|b|, tiny)``; a scale-free gradient mismatch."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)
