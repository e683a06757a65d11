"""Influence on test metrics, correlation and client ranking."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyInputError, ShapeError, UndefinedCorrelationError
from .model import LayeredParams, ModelSpec, accuracy, as_arrays, loss


def _nonempty(test_set):
    X, y = as_arrays(test_set)
    return X, y


def fil(spec: ModelSpec, w_t: LayeredParams, eps: LayeredParams, test_set) -> float:
    """Change in test loss when ``w_t`` is shifted by ``eps``."""
    data = _nonempty(test_set)
    return loss(spec, w_t + eps, data) - loss(spec, w_t, data)


def fia(spec: ModelSpec, w_t: LayeredParams, eps: LayeredParams, test_set) -> float:
    """Change in test accuracy when ``w_t`` is shifted by ``eps``."""
    data = _nonempty(test_set)
    return accuracy(spec, w_t + eps, data) - accuracy(spec, w_t, data)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("pearson needs two equal-length 1-d sequences")
    if len(x) < 2:
        raise EmptyInputError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(dx @ dx))
    sy = float(np.sqrt(dy @ dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def rank_clients(values: Mapping[int, float], direction: str = "valuable-first",
                 metric: str = "fil") -> list[int]:
    """Order clients by value; high FIL or low FIA means valuable.

    Ties go to the smaller client id.
    """
    if direction not in ("valuable-first", "harmful-first"):
        raise ValueError(f"unknown direction {direction!r}")
    if metric not in ("fil", "fia"):
        raise ValueError(f"unknown metric {metric!r}")
    sign = -1.0 if metric == "fil" else 1.0
    if direction == "harmful-first":
        sign = -sign
    return sorted(values, key=lambda c: (sign * values[c], c))
