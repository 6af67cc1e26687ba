"""N:M masks, their validation, and the mask-dynamics statistics.

Weights are laid out ``(R, C)``; each row is cut into ``C / M`` contiguous
groups of ``M`` columns and a valid mask keeps exactly ``N`` entries per group.
Collections of layers are passed as ``dict[name, ndarray]`` with matching keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

__all__ = [
    "NMConfig",
    "MaskValidation",
    "MaskStats",
    "FlipLedger",
    "compute_nm_mask",
    "validate_mask",
    "apply_mask",
    "flip_rate",
    "init_flip_rate",
    "sparse_weight_ratio",
    "one_shot_magnitude_prune",
]

TIE_RULES = ("lowest-index",)


@dataclass(frozen=True)
class NMConfig:
    n_keep: int = 2
    m_group: int = 4
    tie_rule: str = "lowest-index"

    def __post_init__(self):
        if not 0 < self.n_keep < self.m_group:
            raise ValueError(f"need 0 < N < M, got {self.n_keep}:{self.m_group}")
        if self.tie_rule not in TIE_RULES:
            raise ValueError(f"unknown tie rule {self.tie_rule!r}; choose from {TIE_RULES}")


def _groups(a: np.ndarray, m: int) -> np.ndarray:
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    r, c = a.shape
    if c % m:
        raise ValueError(f"group size M={m} does not divide {c} columns")
    return a.reshape(r, c // m, m)


def compute_nm_mask(w: np.ndarray, cfg: NMConfig = NMConfig()) -> np.ndarray:
    """Keep the ``N`` largest-magnitude entries of every group of ``M``.

    Ties go to the lower column index, so every group keeps exactly ``N``.
    Returns a float64 0/1 array shaped like ``w``.
    """
    w = np.asarray(w, dtype=np.float64)
    g = _groups(w, cfg.m_group)
    if not np.isfinite(g).all():
        raise ValueError("cannot rank non-finite weights")
    # stable sort of -|w| keeps lower indices first among equal magnitudes
    order = np.argsort(-np.abs(g), axis=-1, kind="stable")
    mask = np.zeros_like(g)
    np.put_along_axis(mask, order[..., : cfg.n_keep], 1.0, axis=-1)
    return mask.reshape(w.shape)


class MaskValidation(NamedTuple):
    ok: bool
    first_bad: tuple[int, int] | None = None  # (row, group index)
    group_sum: int | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_mask(mask: np.ndarray, cfg: NMConfig = NMConfig()) -> MaskValidation:
    """Check that ``mask`` is binary and every group sums to exactly ``N``."""
    g = _groups(np.asarray(mask), cfg.m_group)
    binary = (g == 0) | (g == 1)
    sums = np.where(binary.all(axis=-1), g.sum(axis=-1), -1)
    bad = np.argwhere(sums != cfg.n_keep)
    if bad.size == 0:
        return MaskValidation(True)
    r, i = (int(v) for v in bad[0])
    return MaskValidation(False, (r, i), int(sums[r, i]))


def apply_mask(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != np.shape(mask):
        raise ValueError(f"mask shape {np.shape(mask)} does not match weights {w.shape}")
    return w * mask


def _check_keys(a: Mapping, b: Mapping) -> None:
    if a.keys() != b.keys():
        raise ValueError("mask collections cover different layers")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ValueError(f"shape mismatch for layer {k!r}")


def _changed_fraction(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    _check_keys(a, b)
    changed = sum(int(np.count_nonzero(a[k] != b[k])) for k in a)
    total = sum(int(np.size(a[k])) for k in a)
    return changed / total if total else 0.0


def flip_rate(prev: Mapping[str, np.ndarray], cur: Mapping[str, np.ndarray]) -> float:
    """Fraction of mask bits that differ between two consecutive refreshes."""
    return _changed_fraction(prev, cur)


def init_flip_rate(init: Mapping[str, np.ndarray], cur: Mapping[str, np.ndarray]) -> float:
    """Fraction of mask bits that differ from the initial masks."""
    return _changed_fraction(init, cur)


def sparse_weight_ratio(weights: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray]) -> float:
    """Unmasked L1 mass over total L1 mass; 1.0 when every masked entry is zero."""
    _check_keys(weights, masks)
    kept = 0.0
    dropped = 0.0
    for k in weights:
        a = np.abs(weights[k])
        kept += float((a * masks[k]).sum())
        dropped += float((a * (1 - masks[k])).sum())
    if dropped == 0.0:
        return 1.0
    # exactly 1 is reserved for a lossless prune, even when the ratio rounds to 1
    return min(kept / (kept + dropped), float(np.nextafter(1.0, 0.0)))


def one_shot_magnitude_prune(
    weights: Mapping[str, np.ndarray], cfg: NMConfig = NMConfig()
) -> dict[str, np.ndarray]:
    return {k: compute_nm_mask(w, cfg) for k, w in weights.items()}


@dataclass
class MaskStats:
    flip_rate: float
    init_flip_rate: float
    sparse_weight_ratio: float
    avg_unmasked_magnitude: float
    avg_magnitude_at_flip: float
    avg_progress_at_last_flip: float


@dataclass
class FlipLedger:
    """Per-entry mask flip history across refreshes.

    ``last_step`` is -1 for entries that never flipped.
    """

    initial: dict[str, np.ndarray]
    previous: dict[str, np.ndarray] = field(init=False)
    last_step: dict[str, np.ndarray] = field(init=False)
    last_magnitude: dict[str, np.ndarray] = field(init=False)
    flip_count: dict[str, np.ndarray] = field(init=False)
    _recent_flip_magnitude: float = field(init=False, default=float("nan"))
    _total_steps: int = field(init=False, default=1)

    def __post_init__(self):
        self.initial = {k: np.array(v, dtype=np.float64) for k, v in self.initial.items()}
        self.previous = {k: v.copy() for k, v in self.initial.items()}
        self.last_step = {k: np.full(v.shape, -1, dtype=np.int64) for k, v in self.initial.items()}
        self.last_magnitude = {k: np.zeros(v.shape) for k, v in self.initial.items()}
        self.flip_count = {k: np.zeros(v.shape, dtype=np.int64) for k, v in self.initial.items()}

    def record(
        self,
        cur: Mapping[str, np.ndarray],
        weights: Mapping[str, np.ndarray],
        step: int,
        total_steps: int,
    ) -> MaskStats:
        """Register the masks produced at ``step`` from ``weights`` and return the stats.

        ``weights`` are the values the new masks were computed from, so the
        magnitude stored for a flipped entry is its magnitude at the flip.
        """
        _check_keys(self.previous, cur)
        self._total_steps = total_steps
        r = flip_rate(self.previous, cur)
        mags = []
        for k, m in cur.items():
            flipped = self.previous[k] != m
            if flipped.any():
                a = np.abs(weights[k])[flipped]
                self.last_step[k][flipped] = step
                self.last_magnitude[k][flipped] = a
                self.flip_count[k][flipped] += 1
                mags.append(a)
        if mags:
            self._recent_flip_magnitude = float(np.concatenate(mags).mean())
        self.previous = {k: np.array(v, dtype=np.float64) for k, v in cur.items()}
        return self.stats(weights, flip=r)

    def stats(self, weights: Mapping[str, np.ndarray], flip: float = 0.0) -> MaskStats:
        cur = self.previous
        unmasked = [np.abs(weights[k])[cur[k] == 1] for k in cur]
        unmasked = np.concatenate(unmasked) if unmasked else np.zeros(0)
        return MaskStats(
            flip_rate=flip,
            init_flip_rate=init_flip_rate(self.initial, cur),
            sparse_weight_ratio=sparse_weight_ratio(weights, cur),
            avg_unmasked_magnitude=float(unmasked.mean()) if unmasked.size else 0.0,
            avg_magnitude_at_flip=self._recent_flip_magnitude,
            avg_progress_at_last_flip=self.progress_at_last_flip(),
        )

    def _ever_flipped(self):
        return [(k, self.last_step[k] >= 0) for k in self.last_step]

    def progress_at_last_flip(self) -> float:
        """Mean of (last flip step / total steps) over entries that ever flipped."""
        steps = [self.last_step[k][sel] for k, sel in self._ever_flipped() if sel.any()]
        if not steps:
            return float("nan")
        return float(np.concatenate(steps).mean()) / self._total_steps

    def magnitude_at_last_flip(self) -> float:
        """Mean |w| at the last flip over entries that ever flipped."""
        mags = [self.last_magnitude[k][sel] for k, sel in self._ever_flipped() if sel.any()]
        if not mags:
            return float("nan")
        return float(np.concatenate(mags).mean())
