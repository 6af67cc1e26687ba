"""Token-only scaling law ``L(D) = A + B * D**-beta`` with a fixed exponent.

``L`` is the natural log of perplexity and ``D`` is measured in billions of
tokens.  The fit is ordinary least squares of ``L`` on ``x = D**-beta``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DEFAULT_BETA",
    "LawPoint",
    "LawFit",
    "Unreachable",
    "fit_token_law",
    "predict_loss",
    "predict_perplexity",
    "tokens_to_match",
    "leave_one_out",
    "read_points",
    "parse_points",
    "points_from",
    "bundled_points",
    "BUNDLED",
]

DEFAULT_BETA = 0.2849
BUNDLED = ("2-7b", "2-13b", "3-8b")


@dataclass(frozen=True)
class LawPoint:
    tokens: float  # billions of tokens
    loss: float  # nats

    def __post_init__(self):
        if not self.tokens > 0:
            raise ValueError(f"token count must be positive, got {self.tokens}")
        if not math.isfinite(self.loss):
            raise ValueError("loss must be finite")

    @classmethod
    def from_perplexity(cls, tokens: float, ppl: float) -> "LawPoint":
        if not ppl > 0:
            raise ValueError(f"perplexity must be positive, got {ppl}")
        return cls(float(tokens), math.log(ppl))


@dataclass(frozen=True)
class LawFit:
    a: float
    b: float
    beta: float
    r2: float
    n_points: int

    def report(self) -> str:
        return (f"A = {self.a:.4f}\nB = {self.b:.4f}\nbeta = {self.beta}\n"
                f"R2 = {self.r2:.4f}\npoints = {self.n_points}\n")


@dataclass(frozen=True)
class Unreachable:
    """Target perplexity at or below the asymptote ``exp(A)``."""

    target_ppl: float
    asymptote_ppl: float

    def __str__(self) -> str:
        return (f"unreachable: target perplexity {self.target_ppl:g} is not above "
                f"the asymptote exp(A) = {self.asymptote_ppl:.4f}")


def fit_token_law(points: Sequence[LawPoint], beta: float = DEFAULT_BETA) -> LawFit:
    if not beta > 0:
        raise ValueError("beta must be positive")
    if len(points) < 2:
        raise ValueError("need at least two points")
    d = np.array([p.tokens for p in points], dtype=np.float64)
    y = np.array([p.loss for p in points], dtype=np.float64)
    if len(np.unique(d)) < 2:
        raise ValueError("token counts must not all be identical")
    x = d ** -beta
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("token counts too close to separate in double precision")
    b = float(((x - xm) * (y - ym)).sum()) / sxx
    a = float(ym - b * xm)
    resid = y - (a + b * x)
    sst = float(((y - ym) ** 2).sum())
    sse = float((resid ** 2).sum())
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    return LawFit(a, b, beta, r2, len(points))


def predict_loss(fit: LawFit, tokens) -> np.ndarray | float:
    d = np.asarray(tokens, dtype=np.float64)
    if (d <= 0).any():
        raise ValueError("token count must be positive")
    out = fit.a + fit.b * d ** -fit.beta
    return float(out) if out.ndim == 0 else out


def predict_perplexity(fit: LawFit, tokens):
    return np.exp(predict_loss(fit, tokens))


def tokens_to_match(fit: LawFit, target_ppl: float) -> float | Unreachable:
    """Tokens (billions) at which the fitted curve reaches ``target_ppl``."""
    gap = math.log(target_ppl) - fit.a
    if gap <= 0 or fit.b <= 0:
        return Unreachable(target_ppl, math.exp(fit.a))
    return (fit.b / gap) ** (1.0 / fit.beta)


@dataclass(frozen=True)
class HoldOut:
    tokens: float
    actual_ppl: float
    predicted_ppl: float

    @property
    def abs_error(self) -> float:
        return abs(self.predicted_ppl - self.actual_ppl)


def leave_one_out(points: Sequence[LawPoint], beta: float = DEFAULT_BETA,
                  all_points: bool = False) -> list[HoldOut]:
    """Refit without each held-out point and predict it; by default only the largest ``D``."""
    if len(points) < 3:
        raise ValueError("leave-one-out needs at least three points")
    order = sorted(range(len(points)), key=lambda i: points[i].tokens)
    held = order if all_points else order[-1:]
    out = []
    for i in held:
        rest = [p for j, p in enumerate(points) if j != i]
        fit = fit_token_law(rest, beta)
        p = points[i]
        out.append(HoldOut(p.tokens, math.exp(p.loss), float(predict_perplexity(fit, p.tokens))))
    return out


def read_points(path) -> list[LawPoint]:
    return parse_points(Path(path).read_text())


def parse_points(text: str) -> list[LawPoint]:
    """Parse ``tokens_billions,perplexity`` CSV text; ``#`` lines are comments."""
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.reader(rows)
    header = [h.strip() for h in next(reader, [])]
    if header != ["tokens_billions", "perplexity"]:
        raise ValueError(f"expected header 'tokens_billions,perplexity', got {','.join(header)!r}")
    points = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 2:
            raise ValueError(f"row {lineno}: expected 2 fields, got {len(row)}")
        try:
            points.append(LawPoint.from_perplexity(float(row[0]), float(row[1])))
        except ValueError as exc:
            raise ValueError(f"row {lineno}: {exc}") from exc
    return points


def bundled_points(name: str) -> list[LawPoint]:
    if name not in BUNDLED:
        raise ValueError(f"unknown bundled table {name!r}; choose from {BUNDLED}")
    return read_points(Path(__file__).parent / "data" / f"retrain_{name}.csv")


def points_from(pairs: Iterable[tuple[float, float]]) -> list[LawPoint]:
    """Points from ``(tokens_billions, perplexity)`` pairs."""
    return [LawPoint.from_perplexity(d, p) for d, p in pairs]
