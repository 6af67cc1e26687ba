"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`GradientProgram` (a Wengert
list) while it is open as a context manager.  Calling
:meth:`GradientProgram.backward` replays the adjoints in reverse recording
order, visiting each node once.

Example::

    with GradientProgram() as prog:
        x = Tensor([3.0], requires_grad=True)
        y = tsum(x * x)
    (gx,) = prog.backward(y, [x])   # array([6.])
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "GradientError",
    "Tensor",
    "GradientProgram",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "embedding",
    "slice_cols",
    "concat_cols",
    "softmax_rows",
    "log_softmax_rows",
    "gather_rows",
    "layer_norm",
    "gelu",
    "log",
    "exp",
    "tsum",
    "mean",
    "ste_mask",
    "finite_diff_grad",
    "LN_EPS",
    "PRIMITIVES",
]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of a gradient program (missing recording, double replay)."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"tensors hold at most 3 dims, got shape {arr.shape}")
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        # internal constructor: skips the copy, keeps the finiteness check
        _check_finite(arr, op)
        if arr.ndim > 3:
            raise ValueError(f"{op} produced {arr.ndim} dims")
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# recording
# --------------------------------------------------------------------------

_ACTIVE: list["GradientProgram"] = []


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradientProgram:
    """Ordered record of primitive applications, replayable in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradientProgram":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors the loss does not depend on receive zeros.  A program can be
        replayed only once.
        """
        if self._consumed:
            raise GradientError("gradient program already replayed; record a new forward pass")
        if loss.data.size != 1:
            raise GradientError("backward needs a scalar loss")
        if not loss.requires_grad:
            if not self.nodes:
                raise GradientError("no recorded operations; run the forward pass inside the program")
            raise GradientError("loss does not depend on any recorded tensor")
        self._consumed = True
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        out = []
        for t in wrt:
            g = adj.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward: Callable) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data + b.data, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data - b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data * b.data, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), Tensor._wrap(-a.data, "neg"), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), Tensor._wrap(a.data * c, "scale"), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ValueError(f"matmul needs two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad @ bd, "matmul")

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record("matmul", (a, b), out, back)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    out = Tensor._wrap(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), "transpose")
    return _record("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = Tensor._wrap(a.data.reshape(shape), "reshape")
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape (flattened)."""
    table = as_tensor(table)
    ids = np.asarray(ids).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out = Tensor._wrap(table.data[ids], "embedding")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", (table,), out, back)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(np.ascontiguousarray(a.data[..., start:stop]), "slice_cols")
    shape = a.shape

    def back(g):
        gt = np.zeros(shape)
        gt[..., start:stop] = g
        return (gt,)

    return _record("slice_cols", (a,), out, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=-1), "concat_cols")
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])

    def back(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", parts, out, back)


def _causal_block(n_rows: int, n_cols: int) -> np.ndarray:
    return np.triu(np.ones((n_rows, n_cols), dtype=bool), k=1)


def softmax_rows(x, causal: bool = False) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    With ``causal=True`` entry ``[..., i, j]`` for ``j > i`` gets probability 0.
    """
    x = as_tensor(x)
    z = x.data
    if causal:
        blocked = _causal_block(z.shape[-2], z.shape[-1])
        z = np.where(blocked, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y, "softmax_rows")

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), out, back)


def log_softmax_rows(x) -> Tensor:
    """Log-softmax over the last axis via a stable log-sum-exp."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor._wrap(y, "log_softmax_rows")

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", (x,), out, back)


def gather_rows(x, idx) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx).reshape(-1)
    if x.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError("gather_rows needs a 2-D tensor and one index per row")
    rows = np.arange(idx.shape[0])
    out = Tensor._wrap(x.data[rows, idx], "gather_rows")
    shape = x.shape

    def back(g):
        gt = np.zeros(shape)
        gt[rows, idx] = g
        return (gt,)

    return _record("gather_rows", (x,), out, back)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have length {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gain.data + bias.data, "layer_norm")
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, d)
        return dx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _record("layer_norm", (x, gain, bias), out, back)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = Tensor._wrap(0.5 * v * (1.0 + th), "gelu")

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return _record("gelu", (x,), out, back)


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    return _record("log", (x,), Tensor._wrap(np.log(xd), "log"), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)  # overflow surfaces as NonFiniteError below
    return _record("exp", (x,), Tensor._wrap(y, "exp"), lambda g: (g * y,))


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = Tensor._wrap(np.asarray(x.data.sum(axis=axis)), "sum")

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (x,), out, back)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def ste_mask(w, mask: np.ndarray) -> Tensor:
    """Masked forward ``w * mask`` whose backward passes gradients straight through."""
    w = as_tensor(w)
    out = Tensor._wrap(w.data * mask, "ste_mask")
    return _record("ste_mask", (w,), out, lambda g: (g,))


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite evaluation at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


# every primitive with a hand-written adjoint, by name
PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "embedding": embedding,
    "slice_cols": slice_cols,
    "concat_cols": concat_cols,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "gather_rows": gather_rows,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "log": log,
    "exp": exp,
    "tsum": tsum,
    "mean": mean,
    "ste_mask": ste_mask,
}
