"""Desk-scale model families and losses.

Two families share one interface: ``init_params()`` returns an ordered dict of
float64 arrays, ``sparsifiable`` names the 2-D projection matrices eligible for
N:M masks (stored ``(out, in)``, so groups run along the input dimension), and
``apply(weights, inputs)`` builds the output tensor from tensor-valued weights.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .corpus import Batch
from .scaling import apply_group_scaling

__all__ = [
    "ModelSpec",
    "TinyTransformer",
    "MLPRegressor",
    "build_model",
    "effective_weights",
    "forward_lm",
    "value_and_grad",
    "loss_and_grads",
    "ce_loss",
    "kl_loss",
    "mse_loss",
    "combined_loss",
    "perplexity",
    "SCALE_PREFIX",
]

SCALE_PREFIX = "scale/"


@dataclass(frozen=True)
class ModelSpec:
    family: str = "tiny-transformer"
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    context: int = 64
    widths: tuple[int, ...] = (16, 64, 64, 8)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.family not in ("tiny-transformer", "mlp"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "tiny-transformer" and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.family == "mlp" and len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(**d)

    def check_divisibility(self, m_group: int, n_scale: int = 1) -> None:
        """Every sparsifiable input width must be a multiple of ``M * n``."""
        unit = m_group * n_scale
        for name, (_, c) in build_model(self).shapes().items():
            if c % unit:
                raise ValueError(f"layer {name} has {c} input columns, not a multiple of M*n={unit}")


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


class TinyTransformer:
    """Decoder-only character transformer with learned absolute positions."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        d, L = spec.d_model, spec.n_layers
        self.sparsifiable = [
            f"blocks.{i}.{p}"
            for i in range(L)
            for p in ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
        ]
        self._shapes = {}
        for i in range(L):
            for p in ("attn_q", "attn_k", "attn_v", "attn_o"):
                self._shapes[f"blocks.{i}.{p}"] = (d, d)
            self._shapes[f"blocks.{i}.mlp_in"] = (4 * d, d)
            self._shapes[f"blocks.{i}.mlp_out"] = (d, 4 * d)

    def shapes(self) -> dict[str, tuple[int, int]]:
        return dict(self._shapes)

    def init_params(self) -> dict[str, np.ndarray]:
        s = self.spec
        d, V = s.d_model, s.vocab_size
        rng = np.random.default_rng(s.seed)
        resid = 1.0 / math.sqrt(2 * s.n_layers)
        p = {
            "tok_emb": _normal(rng, (V, d), 0.1),
            "pos_emb": _normal(rng, (s.context, d), 0.1),
        }
        for i in range(s.n_layers):
            b = f"blocks.{i}."
            p[b + "ln1_g"] = np.ones(d)
            p[b + "ln1_b"] = np.zeros(d)
            for name in ("attn_q", "attn_k", "attn_v"):
                p[b + name] = _normal(rng, (d, d), 1 / math.sqrt(d))
            p[b + "attn_o"] = _normal(rng, (d, d), resid / math.sqrt(d))
            p[b + "ln2_g"] = np.ones(d)
            p[b + "ln2_b"] = np.zeros(d)
            p[b + "mlp_in"] = _normal(rng, (4 * d, d), 1 / math.sqrt(d))
            p[b + "mlp_in_b"] = np.zeros(4 * d)
            p[b + "mlp_out"] = _normal(rng, (d, 4 * d), resid / math.sqrt(4 * d))
            p[b + "mlp_out_b"] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        p["head"] = _normal(rng, (V, d), 1 / math.sqrt(d))
        return p

    def apply(self, w: Mapping[str, T.Tensor], tokens: np.ndarray) -> T.Tensor:
        """Logits of shape ``(B * s, V)`` for token ids ``(B, s)``."""
        s = self.spec
        tokens = np.asarray(tokens)
        B, n = tokens.shape
        if n > s.context:
            raise ValueError(f"sequence length {n} exceeds context {s.context}")
        d, h = s.d_model, s.n_heads
        dh = d // h
        pos = np.tile(np.arange(n), B)
        x = T.embedding(w["tok_emb"], tokens) + T.embedding(w["pos_emb"], pos)
        att_scale = 1.0 / math.sqrt(dh)
        for i in range(s.n_layers):
            b = f"blocks.{i}."
            a = T.layer_norm(x, w[b + "ln1_g"], w[b + "ln1_b"])
            q = a @ w[b + "attn_q"].T
            k = a @ w[b + "attn_k"].T
            v = a @ w[b + "attn_v"].T
            heads = []
            for j in range(h):
                sl = (j * dh, (j + 1) * dh)
                qh = T.reshape(T.slice_cols(q, *sl), (B, n, dh))
                kh = T.reshape(T.slice_cols(k, *sl), (B, n, dh))
                vh = T.reshape(T.slice_cols(v, *sl), (B, n, dh))
                att = T.softmax_rows(T.scale(qh @ T.transpose(kh), att_scale), causal=True)
                heads.append(T.reshape(att @ vh, (B * n, dh)))
            x = x + T.concat_cols(heads) @ w[b + "attn_o"].T
            a = T.layer_norm(x, w[b + "ln2_g"], w[b + "ln2_b"])
            hid = T.gelu(a @ w[b + "mlp_in"].T + w[b + "mlp_in_b"])
            x = x + (hid @ w[b + "mlp_out"].T + w[b + "mlp_out_b"])
        x = T.layer_norm(x, w["lnf_g"], w["lnf_b"])
        return x @ w["head"].T


class MLPRegressor:
    """GELU multilayer perceptron; every layer but the output head is sparsifiable."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        ws = spec.widths
        self._shapes = {f"fc{i}": (ws[i + 1], ws[i]) for i in range(len(ws) - 2)}
        self.sparsifiable = list(self._shapes)

    def shapes(self) -> dict[str, tuple[int, int]]:
        return dict(self._shapes)

    def init_params(self) -> dict[str, np.ndarray]:
        ws = self.spec.widths
        rng = np.random.default_rng(self.spec.seed)
        p = {}
        for i in range(len(ws) - 1):
            name = f"fc{i}" if i < len(ws) - 2 else "head"
            p[name] = _normal(rng, (ws[i + 1], ws[i]), 1 / math.sqrt(ws[i]))
            p[name + "_b"] = np.zeros(ws[i + 1])
        return p

    def apply(self, w: Mapping[str, T.Tensor], x: np.ndarray) -> T.Tensor:
        h = T.as_tensor(np.asarray(x, dtype=np.float64))
        for name in self.sparsifiable:
            h = T.gelu(h @ w[name].T + w[name + "_b"])
        return h @ w["head"].T + w["head_b"]


def build_model(spec: ModelSpec):
    if spec.family == "mlp":
        return MLPRegressor(spec)
    return TinyTransformer(spec)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def ce_loss(logits, targets) -> T.Tensor:
    """Mean token negative log-likelihood in nats."""
    logp = T.log_softmax_rows(logits)
    return T.neg(T.mean(T.gather_rows(logp, np.asarray(targets).reshape(-1))))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_loss(teacher_logits, student_logits) -> T.Tensor:
    """Mean over rows of KL(P_teacher || P_student); the teacher is a constant."""
    t = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else np.asarray(teacher_logits)
    student_logits = T.as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ValueError("teacher and student logits differ in shape")
    logpt = _log_softmax_np(t)
    pt = np.exp(logpt)
    n_rows = t.shape[0]
    const = float((pt * logpt).sum()) / n_rows
    cross = T.scale(T.tsum(T.mul(pt, T.log_softmax_rows(student_logits))), 1.0 / n_rows)
    return T.sub(const, cross)


def mse_loss(pred, target) -> T.Tensor:
    diff = T.sub(pred, np.asarray(target, dtype=np.float64))
    return T.mean(T.mul(diff, diff))


def combined_loss(kl, ce, eta: float):
    """``eta * kl + (1 - eta) * ce`` for floats or tensors."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"distillation weight eta={eta} outside [0, 1]")
    if eta == 1.0:
        return kl
    if eta == 0.0:
        return ce
    if isinstance(kl, T.Tensor) or isinstance(ce, T.Tensor):
        return T.add(T.scale(kl, eta), T.scale(ce, 1.0 - eta))
    return eta * kl + (1.0 - eta) * ce


def perplexity(mean_ce: float) -> float:
    return math.exp(mean_ce)


# --------------------------------------------------------------------------
# forward passes and gradients
# --------------------------------------------------------------------------

def effective_weights(
    leaves: Mapping[str, T.Tensor],
    sparsifiable,
    mode: str = "dense",
    masks: Mapping[str, np.ndarray] | None = None,
    scaling: Mapping[str, T.Tensor] | None = None,
) -> dict[str, T.Tensor]:
    """Weights as seen by the forward pass.

    ``dense`` uses the full (scaled) matrices; ``sparse`` multiplies by the
    masks first, with a straight-through backward so masked entries still get
    the gradient of the masked forward.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if mode == "sparse" and masks is None:
        raise ValueError("sparse forward needs masks")
    out = dict(leaves)
    for name in sparsifiable:
        w = leaves[name]
        if mode == "sparse":
            w = T.ste_mask(w, masks[name])
        if scaling is not None and name in scaling:
            w = apply_group_scaling(w, scaling[name])
        out[name] = w
    return out


def forward_lm(model, params: Mapping[str, np.ndarray], inputs, mode: str = "dense",
               masks=None, scaling=None) -> np.ndarray:
    """Model outputs without recording gradients."""
    leaves = {k: T.as_tensor(v) for k, v in params.items()}
    sc = None if scaling is None else {k: T.as_tensor(v) for k, v in scaling.items()}
    w = effective_weights(leaves, model.sparsifiable, mode, masks, sc)
    return model.apply(w, inputs).data


def value_and_grad(fn: Callable[[dict[str, T.Tensor]], T.Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate scalar ``fn`` on tensor leaves built from ``params`` and differentiate it."""
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    with T.GradientProgram() as prog:
        out = fn(leaves)
        if not isinstance(out, T.Tensor):
            out = T.Tensor(out)
        value = float(out.data)
        if not math.isfinite(value):
            raise T.NonFiniteError("non-finite loss")
        if out.requires_grad:
            grads = prog.backward(out, list(leaves.values()))
        else:
            grads = [np.zeros_like(t.data) for t in leaves.values()]
    return value, dict(zip(leaves, grads))


def model_loss(model, w: Mapping[str, T.Tensor], batch: Batch, loss_kind: str,
               teacher_out=None, eta: float = 0.0) -> T.Tensor:
    out = model.apply(w, batch.inputs)
    regression = isinstance(model, MLPRegressor)
    if loss_kind == "ce":
        return ce_loss(out, batch.targets)
    if loss_kind == "mse":
        return mse_loss(out, batch.targets)
    if loss_kind == "kd":
        if teacher_out is None:
            raise ValueError("distillation needs teacher outputs")
        if regression:
            return combined_loss(mse_loss(out, teacher_out), mse_loss(out, batch.targets), eta)
        return combined_loss(kl_loss(teacher_out, out), ce_loss(out, batch.targets), eta)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def loss_and_grads(
    model,
    params: Mapping[str, np.ndarray],
    batch: Batch,
    loss_kind: str = "ce",
    *,
    mode: str = "dense",
    masks=None,
    scaling: Mapping[str, np.ndarray] | None = None,
    teacher_out=None,
    eta: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every parameter.

    Scaling factors, when given, are differentiated too and reported under
    ``"scale/<layer>"``.
    """
    flat = dict(params)
    if scaling is not None:
        flat.update({SCALE_PREFIX + k: v for k, v in scaling.items()})

    def fn(leaves):
        base = {k: v for k, v in leaves.items() if not k.startswith(SCALE_PREFIX)}
        sc = None
        if scaling is not None:
            sc = {k[len(SCALE_PREFIX):]: v for k, v in leaves.items() if k.startswith(SCALE_PREFIX)}
        w = effective_weights(base, model.sparsifiable, mode, masks, sc)
        return model_loss(model, w, batch, loss_kind, teacher_out, eta)

    return value_and_grad(fn, flat)
