"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  Every key is also a
command-line flag (``--key``, with ``_`` written as ``-``).  Unknown keys are
rejected and the fully resolved config is written back into the run
directory, so a run can always be repeated from its own record.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .corpus import CorpusData, RegressionData, load_corpus
from .nn import ModelSpec
from .trainer import TrainPlan

__all__ = ["RunConfig", "ConfigError", "parse_config", "load_config", "KEYS"]


class ConfigError(ValueError):
    """Bad key, bad value or missing required field."""


@dataclass(frozen=True)
class RunConfig:
    # sparsification inputs
    method: str = "cast"
    checkpoint: str = ""
    # data
    corpus: str = "synthetic"
    corpus_seed: int = 0
    corpus_bytes: int = 3_000_000
    val_fraction: float = 0.1
    # model
    family: str = "tiny-transformer"
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    context: int = 64
    widths: str = "16,64,64,8"
    # training
    seed: int = 0
    steps: int = 3000
    batch_size: int = 8
    lr: float = 7e-4
    schedule: str = "cosine"
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: str = "auto"
    lambda_batches: int = 100
    srste_lr: float = 4.0
    srste_lambda: float = 2e-4
    eta: float = 2.0 / 3.0
    kd: bool = False
    n_keep: int = 2
    m_group: int = 4
    n_scale: int = 2
    mask_interval: int = 10
    eval_every: int = 50
    eval_seqs: int = 64
    matched_budget: bool = True

    def spec(self) -> ModelSpec:
        try:
            widths = tuple(int(w) for w in self.widths.split(","))
            return ModelSpec(self.family, self.vocab_size, self.d_model, self.n_heads,
                             self.n_layers, self.context, widths, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def data(self):
        """Training data for the configured model family."""
        spec = self.spec()
        if spec.family == "mlp":
            return RegressionData.linear(self.corpus_seed, spec.widths[0], spec.widths[-1])
        if self.corpus != "synthetic" and not Path(self.corpus).is_file():
            raise ConfigError(f"corpus: file not found: {self.corpus}")
        raw = load_corpus(self.corpus, self.corpus_seed, self.corpus_bytes)
        try:
            return CorpusData.from_bytes(raw, self.vocab_size, self.context, self.val_fraction)
        except ValueError as exc:
            raise ConfigError(f"corpus: {exc}") from exc

    def lam_value(self) -> float | None:
        if self.lam == "auto":
            return None
        try:
            return float(self.lam)
        except ValueError:
            raise ConfigError(f"lambda: expected a number or 'auto', got {self.lam!r}") from None

    def plan(self, method: str) -> TrainPlan:
        try:
            return TrainPlan(
                method=method, spec=self.spec(), steps=self.steps, batch_size=self.batch_size,
                lr=self.lr, schedule=self.schedule, warmup=self.warmup, beta1=self.beta1,
                beta2=self.beta2, eps=self.eps, lam=self.lam_value(),
                lambda_batches=self.lambda_batches, srste_lr=self.srste_lr,
                srste_lambda=self.srste_lambda, eta=self.eta, kd=self.kd, n_keep=self.n_keep,
                m_group=self.m_group, n_scale=self.n_scale, mask_interval=self.mask_interval,
                eval_every=self.eval_every, eval_seqs=self.eval_seqs,
                matched_budget=self.matched_budget, seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{_key(f.name)} = {v}")
        return "\n".join(lines) + "\n"

    def override(self, values: Mapping[str, object]) -> "RunConfig":
        """Replace fields from already-typed or string values."""
        updates = {}
        for key, raw in values.items():
            name = _field(key)
            updates[name] = raw if not isinstance(raw, str) else _convert(name, raw)
        return dataclasses.replace(self, **updates)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _key(name: str) -> str:
    # "lambda" is a Python keyword, so the field is spelled "lam"
    return "lambda" if name == "lam" else name


def _field(key: str) -> str:
    if key == "lambda":
        return "lam"
    if key == "lam" or key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return key


KEYS = tuple(_key(n) for n in _TYPES)


def _convert(name: str, raw: str):
    kind = _TYPES[name]
    raw = raw.strip()
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{_key(name)}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return (base or RunConfig()).override(values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    return parse_config(p.read_text())
