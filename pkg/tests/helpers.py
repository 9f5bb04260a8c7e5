"""Shared test utilities: finite differences and small param constructors."""

from __future__ import annotations

import numpy as np

from warmflow import nn


def central_diff_grads(loss_fn, params: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. a flat vector."""
    grads = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        grads[i] = (loss_fn(up) - loss_fn(dn)) / (2.0 * h)
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def dense_random_params(spec: nn.MlpSpec, rng: np.random.Generator, scale: float = 0.3) -> np.ndarray:
    """Random values for every parameter, including the conditioning maps."""
    return rng.standard_normal(nn.n_params(spec)) * scale
