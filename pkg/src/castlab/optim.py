"""Parameter update rules.

Every step function is a pure elementwise transform: it takes the current
values, the gradient, the mask (1 = kept, 0 = masked) and a
:class:`MomentState`, and returns ``(new_values, new_state)``.  Scalars and
arrays are both accepted.

Decay on masked entries comes in four flavours:

* :func:`adams_step`     blends momentum and ``lam * sign(theta)`` with weight
  ``t / T`` and drives the second moment with the blend;
* :func:`adam_l1_step`   adds ``lam * sign(theta)`` to the gradient;
* :func:`adamw_l1_step`  subtracts ``lr * lam * sign(theta)`` after the Adam step;
* :func:`srste_step`     plain SGD with ``lam * theta`` decay (STE gradients).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError

__all__ = [
    "MomentState",
    "AdamSConfig",
    "Schedule",
    "alpha_at",
    "lr_at",
    "adam_step",
    "adams_step",
    "adam_l1_step",
    "adamw_l1_step",
    "srste_step",
    "sgd_step",
]


@dataclass(frozen=True)
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, theta) -> "MomentState":
        z = np.zeros(np.shape(theta))
        return cls(z, z.copy(), 0)


@dataclass(frozen=True)
class AdamSConfig:
    lam: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    mask_interval: int = 10

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("decay strength must be non-negative")
        if self.total_steps < 1 or self.mask_interval < 1:
            raise ValueError("total_steps and mask_interval must be >= 1")


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: ``constant`` or linear warmup then ``cosine`` to 10% of base."""

    kind: str = "constant"
    base: float = 1e-3
    warmup: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")


def alpha_at(t: int, total: int) -> float:
    """Decay blend weight ``t / T``."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return t / total


def lr_at(schedule: Schedule, t: int, total: int) -> float:
    """Learning rate for (1-based) training step ``t`` of ``total``."""
    if schedule.kind == "constant":
        return schedule.base
    if t < schedule.warmup:
        return schedule.base * t / schedule.warmup
    span = max(total - schedule.warmup, 1)
    p = min(max((t - schedule.warmup) / span, 0.0), 1.0)
    return schedule.base * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * p)))


def _grad(g):
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient")
    return g


def _bias(beta1, beta2, t):
    return 1.0 - beta1 ** t, 1.0 - beta2 ** t


def adam_step(theta, grad, state: MomentState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Textbook bias-corrected Adam."""
    g = _grad(grad)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    c1, c2 = _bias(beta1, beta2, t)
    new = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new, MomentState(m, v, t)


def adams_step(theta, grad, mask, state: MomentState, cfg: AdamSConfig, lr: float):
    """One AdamS update at step ``state.t + 1``.

    Masked entries (``mask == 0``) get the proportional blend
    ``(1 - a) * m + a * lam * sign(theta)`` with ``a = t / T``; the second
    moment is driven by the blended signal for every entry.
    """
    g = _grad(grad)
    t = state.t + 1
    theta = np.asarray(theta, dtype=np.float64)
    b1, b2 = cfg.beta1, cfg.beta2
    m = b1 * state.m + (1 - b1) * g
    a = alpha_at(t, cfg.total_steps)
    blended = (1 - a) * m + a * cfg.lam * np.sign(theta)
    m_tilde = np.where(np.asarray(mask) == 0, blended, m)
    v = b2 * state.v + (1 - b2) * m_tilde * m_tilde
    c1, c2 = _bias(b1, b2, t)
    new = theta - lr * (m_tilde / c1) / (np.sqrt(v / c2) + cfg.eps)
    return new, MomentState(m, v, t)


def adam_l1_step(theta, grad, mask, state: MomentState, lam: float, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam with ``lam * sign(theta)`` folded into the gradient of masked entries."""
    theta = np.asarray(theta, dtype=np.float64)
    g = _grad(grad)
    g = np.where(np.asarray(mask) == 0, g + lam * np.sign(theta), g)
    return adam_step(theta, g, state, lr, beta1, beta2, eps)


def adamw_l1_step(theta, grad, mask, state: MomentState, lam: float, lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam on the raw gradient, then a decoupled ``lr * lam * sign(theta)`` on masked entries."""
    theta = np.asarray(theta, dtype=np.float64)
    new, st = adam_step(theta, grad, state, lr, beta1, beta2, eps)
    decay = np.where(np.asarray(mask) == 0, lam * np.sign(theta), 0.0)
    return new - lr * decay, st


def srste_step(theta, grad, mask, lam: float, lr: float):
    """SGD on the sparse-forward gradient plus ``lam * theta`` decay on masked entries."""
    theta = np.asarray(theta, dtype=np.float64)
    g = _grad(grad)
    return theta - lr * (g + np.where(np.asarray(mask) == 0, lam * theta, 0.0))


def sgd_step(theta, grad, lr: float):
    return np.asarray(theta, dtype=np.float64) - lr * _grad(grad)
