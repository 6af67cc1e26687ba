"""Learnable group-wise weight scaling and its fold-in.

A layer ``W`` of shape ``(R, C)`` carries factors ``A`` of shape ``(R, n)``;
column ``c`` of row ``r`` is multiplied by ``A[r, c // (C // n)]``.  The
forward pass reshapes ``W`` to ``(R * n, C / n)`` and scales each reshaped row,
so the same arithmetic gives both the differentiable path and the fold.
"""
from __future__ import annotations

import warnings
from typing import Mapping

import numpy as np

from . import tensor as T

__all__ = ["init_scaling", "check_scaling_shape", "apply_group_scaling", "fold_scaling"]


def check_scaling_shape(shape: tuple[int, int], n: int, m_group: int = 4) -> None:
    r, c = shape
    if n < 1 or c % n:
        raise ValueError(f"scaling group count n={n} does not divide {c} columns")
    if (c // n) % m_group:
        raise ValueError(
            f"segment length {c // n} is not a multiple of M={m_group}; "
            "scaling segments would straddle N:M groups"
        )


def init_scaling(layer_shapes: Mapping[str, tuple[int, int]], n: int = 2,
                 m_group: int = 4) -> dict[str, np.ndarray]:
    """All-ones factors ``(R_k, n)`` for every layer."""
    out = {}
    for name, shape in layer_shapes.items():
        check_scaling_shape(tuple(shape), n, m_group)
        out[name] = np.ones((shape[0], n))
    return out


def _check_factors(a: np.ndarray) -> None:
    if (a == 0).any():
        warnings.warn("scaling factor exactly 0 zeroes a whole segment", RuntimeWarning, stacklevel=3)
    elif (a < 0).any():
        warnings.warn("negative scaling factor inverts the magnitude ranking of its segment",
                      RuntimeWarning, stacklevel=3)


def apply_group_scaling(w, a) -> T.Tensor:
    """Scaled weights as a differentiable tensor (gradients flow to both ``w`` and ``a``)."""
    w, a = T.as_tensor(w), T.as_tensor(a)
    r, c = w.shape
    if a.ndim != 2 or a.shape[0] != r:
        raise ValueError(f"factors {a.shape} do not match weights {w.shape}")
    n = a.shape[1]
    if c % n:
        raise ValueError(f"n={n} does not divide {c} columns")
    wt = T.reshape(w, (r * n, c // n))
    at = T.reshape(a, (r * n, 1))
    return T.reshape(T.mul(wt, at), (r, c))


def fold_scaling(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Materialize the scaled weights; bitwise equal to :func:`apply_group_scaling`."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    r, c = w.shape
    if a.ndim != 2 or a.shape[0] != r or c % a.shape[1]:
        raise ValueError(f"factors {a.shape} do not match weights {w.shape}")
    _check_factors(a)
    n = a.shape[1]
    return (w.reshape(r * n, c // n) * a.reshape(r * n, 1)).reshape(r, c)
