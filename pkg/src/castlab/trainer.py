"""Training pipelines: dense pretraining, CAST, SR-STE, naive retraining, export and probes.

Every pipeline is a deterministic function of ``(plan, checkpoint, data)``:
batches come from one ``numpy`` generator seeded by ``plan.seed`` and all
arithmetic is float64, so two runs with the same inputs agree bit for bit.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .nn import SCALE_PREFIX, MLPRegressor, ModelSpec, build_model, forward_lm, loss_and_grads
from .optim import AdamSConfig, MomentState, Schedule, adam_step, adams_step, alpha_at, lr_at, sgd_step, srste_step
from .scaling import fold_scaling, init_scaling
from .sparsity import FlipLedger, NMConfig, compute_nm_mask, one_shot_magnitude_prune, validate_mask

__all__ = [
    "TrainPlan",
    "RunMetrics",
    "METRIC_COLUMNS",
    "REFRESH_COLUMNS",
    "ExportRefused",
    "TrainingDiverged",
    "S_T_THRESHOLD",
    "KD_FLOP_WEIGHT",
    "LAMBDA_SCALE",
    "effective_steps",
    "pretrain_dense",
    "calibrate_lambda",
    "cast_train",
    "srste_train",
    "naive_retrain",
    "final_prune_and_fold",
    "check_exported",
    "evaluate",
    "dense_forward_probe",
    "SteProbe",
    "ste_error",
    "ste_error_probe",
]

METRIC_COLUMNS = (
    "step", "train_loss", "val_ce", "val_ppl", "dense_ppl", "r_t", "i_t", "S_t",
    "avg_unmasked_mag", "avg_mag_at_flip", "prog_at_last_flip", "alpha", "lr",
)
REFRESH_COLUMNS = (
    "step", "r_t", "i_t", "S_t", "avg_unmasked_mag", "avg_mag_at_flip", "prog_at_last_flip",
)
S_T_THRESHOLD = 0.999
KD_FLOP_WEIGHT = 4.0 / 3.0  # teacher forward on top of student forward + backward
# auto lambda = LAMBDA_SCALE * median |g|; large enough that masked weights reach zero with
# time left to recover, small enough that the dense forward stays close to the teacher
LAMBDA_SCALE = 5.0
METHODS = ("dense", "cast", "srste", "naive")
NAN = float("nan")


@dataclass(frozen=True)
class TrainPlan:
    """Everything a run needs besides the data and the starting checkpoint.

    ``steps`` is the step count of a distillation run; runs without a teacher
    get ``round(4/3 * steps)`` when ``matched_budget`` is set.  ``lam=None``
    calibrates the AdamS decay strength from gradients at the start point.
    """

    method: str = "dense"
    spec: ModelSpec = field(default_factory=ModelSpec)
    steps: int = 3000
    batch_size: int = 8
    lr: float = 7e-4
    schedule: str = "cosine"
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float | None = None
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
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_seqs < 1:
            raise ValueError("batch_size, eval_every and eval_seqs must be >= 1")
        if self.lr <= 0 or self.srste_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.srste_lambda < 0:
            raise ValueError("srste_lambda must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.mask_interval < 1:
            raise ValueError("mask_interval must be >= 1")
        NMConfig(self.n_keep, self.m_group)

    @property
    def nm(self) -> NMConfig:
        return NMConfig(self.n_keep, self.m_group)

    @property
    def uses_teacher(self) -> bool:
        return self.method == "cast" or (self.method in ("srste", "naive") and self.kd)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d


def effective_steps(plan: TrainPlan) -> int:
    """Step count after the matched-compute credit for runs without a teacher."""
    if plan.method == "dense" or plan.uses_teacher or not plan.matched_budget:
        return plan.steps
    return int(round(KD_FLOP_WEIGHT * plan.steps))


class ExportRefused(RuntimeError):
    """Final prune would not be lossless: masked weights still carry L1 mass."""

    def __init__(self, s_t: float, checkpoint: Checkpoint | None = None,
                 metrics: "RunMetrics | None" = None):
        super().__init__(
            f"export refused: sparse weight ratio S_T={s_t:.6f} < {S_T_THRESHOLD} "
            "(masked weights were not driven to zero; increase lambda or the step count)"
        )
        self.s_t = s_t
        self.checkpoint = checkpoint
        self.metrics = metrics


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, dump_path: Path | None):
        where = f"; last good state written to {dump_path}" if dump_path else ""
        super().__init__(f"non-finite loss or gradient at step {step}{where}")
        self.step = step
        self.dump_path = dump_path


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    refreshes: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metric steps must increase")
        self.rows.append({c: row.get(c, NAN) for c in METRIC_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def refresh_column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.refreshes], dtype=np.float64)

    @staticmethod
    def _csv(cols, rows) -> str:
        out = io.StringIO()
        out.write(",".join(cols) + "\n")
        for r in rows:
            out.write(",".join(_fmt(r[c]) for c in cols) + "\n")
        return out.getvalue()

    def to_csv(self) -> str:
        return self._csv(METRIC_COLUMNS, self.rows)

    def refresh_csv(self) -> str:
        return self._csv(REFRESH_COLUMNS, self.refreshes)

    def report(self) -> str:
        return "".join(f"{k} = {_fmt(v) if isinstance(v, float) else v}\n"
                       for k, v in self.summary.items())

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.csv").write_text(self.to_csv())
        if self.refreshes:
            (run_dir / "refresh.csv").write_text(self.refresh_csv())
        (run_dir / "report.txt").write_text(self.report())

    @classmethod
    def read_csv(cls, path) -> "RunMetrics":
        lines = Path(path).read_text().strip().splitlines()
        cols = lines[0].split(",")
        rows = [dict(zip(cols, (float(v) for v in ln.split(",")))) for ln in lines[1:]]
        for r in rows:
            r["step"] = int(r["step"])
        return cls(rows=rows)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _is_regression(model) -> bool:
    return isinstance(model, MLPRegressor)


def evaluate(model, params, batch, mode: str = "dense", masks=None, scaling=None) -> float:
    """Mean validation loss: token cross-entropy (nats) or MSE for regression."""
    out = forward_lm(model, params, batch.inputs, mode, masks, scaling)
    if _is_regression(model):
        return float(np.mean((out - batch.targets) ** 2))
    z = out - out.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    tgt = np.asarray(batch.targets).reshape(-1)
    return float(-logp[np.arange(tgt.size), tgt].mean())


def _ppl(model, loss: float) -> float:
    if _is_regression(model):
        return NAN
    # a finite but huge CE (e.g. a dense forward far off the sparse optimum) is reported as inf
    return math.exp(loss) if loss < 709.0 else math.inf


def dense_forward_probe(checkpoints: Iterable[Checkpoint], val_batch) -> list[float]:
    """Dense-forward validation perplexity (with scaling, masks ignored) of each checkpoint."""
    out = []
    for ck in checkpoints:
        model = build_model(ck.spec)
        out.append(_ppl(model, evaluate(model, ck.params, val_batch, "dense", None, ck.scaling)))
    return out


# --------------------------------------------------------------------------
# shared loop machinery
# --------------------------------------------------------------------------

def _schedule(plan: TrainPlan, base: float) -> Schedule:
    return Schedule(plan.schedule, base, plan.warmup if plan.schedule == "cosine" else 0)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _dump(dump_dir, plan, params, masks, scaling, step, rng) -> Path | None:
    if dump_dir is None:
        return None
    ck = Checkpoint(plan.spec, params, masks, scaling, step=step, rng_state=_rng_state(rng),
                    meta={"method": plan.method, "diverged": True})
    return save_checkpoint(ck, Path(dump_dir) / "diverged.ckpt")


def _checked(fn, step, dump):
    try:
        return fn()
    except FloatingPointError as exc:
        raise TrainingDiverged(step, dump()) from exc


def _teacher(model, teacher_params, batch):
    return forward_lm(model, teacher_params, batch.inputs, "dense")


def _loss_kind(model, with_teacher: bool) -> str:
    if with_teacher:
        return "kd"
    return "mse" if _is_regression(model) else "ce"


def _meta(plan: TrainPlan, data, **extra) -> dict:
    meta = {"method": plan.method, "exported": False, "n_keep": plan.n_keep,
            "m_group": plan.m_group, "seed": plan.seed}
    vocab = getattr(data, "vocab", None)
    if vocab is not None:
        meta["vocab"] = vocab.symbols.hex()
    meta.update(extra)
    return meta


# --------------------------------------------------------------------------
# dense pretraining
# --------------------------------------------------------------------------

def pretrain_dense(plan: TrainPlan, data, *, dump_dir=None) -> tuple[Checkpoint, RunMetrics]:
    """Plain Adam on cross-entropy (or MSE for the regression MLP)."""
    if plan.method != "dense":
        raise ValueError("pretrain_dense needs method='dense'")
    model = build_model(plan.spec)
    params = model.init_params()
    states = {k: MomentState.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(plan.seed)
    sched = _schedule(plan, plan.lr)
    val = data.validation(plan.eval_seqs)
    kind = _loss_kind(model, False)
    metrics = RunMetrics()
    steps = plan.steps

    def log(t, loss, lr):
        v = evaluate(model, params, val)
        metrics.add(step=t, train_loss=loss, val_ce=v, val_ppl=_ppl(model, v), dense_ppl=_ppl(model, v), lr=lr)

    log(0, NAN, 0.0)
    for t in range(1, steps + 1):
        batch = data.sample(rng, plan.batch_size)
        lr = lr_at(sched, t, steps)
        dump = lambda: _dump(dump_dir, plan, params, None, None, t - 1, rng)  # noqa: E731
        loss, grads = _checked(lambda: loss_and_grads(model, params, batch, kind), t, dump)

        def update():
            new_p, new_s = {}, {}
            for k in params:
                new_p[k], new_s[k] = adam_step(params[k], grads[k], states[k], lr,
                                               plan.beta1, plan.beta2, plan.eps)
            return new_p, new_s

        params, states = _checked(update, t, dump)
        if t % plan.eval_every == 0 or t == steps:
            log(t, loss, lr)
    final = metrics.rows[-1]["val_ce"]
    metrics.summary = {"method": "dense", "steps": steps, "final_val_ce": final,
                       "final_val_ppl": _ppl(model, final), "flop_weight": 1.0,
                       "budget": float(steps)}
    meta = _meta(plan, data, val_ce=final)
    ck = Checkpoint(plan.spec, params, None, None, states, steps, _rng_state(rng), meta)
    return ck, metrics


# --------------------------------------------------------------------------
# sparsification pipelines
# --------------------------------------------------------------------------

def calibrate_lambda(model, params, data, plan: TrainPlan) -> float:
    """``LAMBDA_SCALE`` times the median |g| over sparsifiable entries.

    The median is pooled over ``plan.lambda_batches`` batches.

    Gradients are taken at the starting weights with the run's own loss;
    nothing is updated.  A dedicated generator keeps the run's batch stream
    untouched.
    """
    rng = np.random.default_rng([plan.seed, 0x1A4B])
    kind = _loss_kind(model, plan.uses_teacher)
    pooled = []
    for _ in range(plan.lambda_batches):
        batch = data.sample(rng, plan.batch_size)
        teacher = _teacher(model, params, batch) if plan.uses_teacher else None
        _, g = loss_and_grads(model, params, batch, kind, teacher_out=teacher, eta=plan.eta)
        pooled.append(np.concatenate([np.abs(g[k]).ravel() for k in model.sparsifiable]))
    return LAMBDA_SCALE * float(np.median(np.concatenate(pooled)))


@dataclass
class _Loop:
    """State shared by the sparse pipelines."""

    plan: TrainPlan
    model: object
    params: dict
    masks: dict
    ledger: FlipLedger
    metrics: RunMetrics
    val: object
    total: int
    scaling: dict | None = None

    def sparse_params(self):
        return {k: self.params[k] for k in self.model.sparsifiable}

    def eval_row(self, t, loss, lr, alpha, flip):
        m, p = self.model, self.params
        vs = evaluate(m, p, self.val, "sparse", self.masks, self.scaling)
        vd = evaluate(m, p, self.val, "dense", None, self.scaling)
        st = self.ledger.stats(self.sparse_params(), flip=flip)
        self.metrics.add(
            step=t, train_loss=loss, val_ce=vs, val_ppl=_ppl(m, vs), dense_ppl=_ppl(m, vd),
            r_t=st.flip_rate, i_t=st.init_flip_rate, S_t=st.sparse_weight_ratio,
            avg_unmasked_mag=st.avg_unmasked_magnitude, avg_mag_at_flip=st.avg_magnitude_at_flip,
            prog_at_last_flip=st.avg_progress_at_last_flip, alpha=alpha, lr=lr,
        )
        return vs, vd

    def refresh(self, t, new_masks) -> float:
        st = self.ledger.record(new_masks, self.sparse_params(), t, self.total)
        self.masks = new_masks
        self.metrics.refreshes.append({
            "step": t, "r_t": st.flip_rate, "i_t": st.init_flip_rate, "S_t": st.sparse_weight_ratio,
            "avg_unmasked_mag": st.avg_unmasked_magnitude, "avg_mag_at_flip": st.avg_magnitude_at_flip,
            "prog_at_last_flip": st.avg_progress_at_last_flip,
        })
        return st.flip_rate


def _init_loop(plan, dense_ckpt, data, total):
    if dense_ckpt.spec != plan.spec:
        raise ValueError("checkpoint model spec differs from the plan's")
    model = build_model(plan.spec)
    if dense_ckpt.masks is not None or dense_ckpt.scaling is not None:
        raise ValueError("sparsification starts from a dense checkpoint without masks or scaling")
    params = {k: np.array(v) for k, v in dense_ckpt.params.items()}
    masks = one_shot_magnitude_prune({k: params[k] for k in model.sparsifiable}, plan.nm)
    loop = _Loop(plan, model, params, masks, FlipLedger(masks), RunMetrics(),
                 data.validation(plan.eval_seqs), total)
    return loop


def _summary(loop: _Loop, method, steps, flop_weight, extra) -> dict:
    led = loop.ledger
    r = loop.metrics.refresh_column("r_t")
    k = max(1, int(math.ceil(0.1 * len(r)))) if len(r) else 0
    s = {
        "method": method,
        "steps": steps,
        "flop_weight": flop_weight,
        "budget": steps * flop_weight,
        "final_val_ce": loop.metrics.rows[-1]["val_ce"],
        "final_val_ppl": loop.metrics.rows[-1]["val_ppl"],
        "final_dense_ppl": loop.metrics.rows[-1]["dense_ppl"],
        "S_T": loop.metrics.rows[-1]["S_t"],
        "mag_at_last_flip": led.magnitude_at_last_flip(),
        "prog_at_last_flip": led.progress_at_last_flip(),
        "flip_rate_first10": float(r[:k].mean()) if k else NAN,
        "flip_rate_last10": float(r[-k:].mean()) if k else NAN,
        "n_refreshes": len(r),
    }
    s.update(extra)
    return s


def cast_train(plan: TrainPlan, dense_ckpt: Checkpoint, data, *, dump_dir=None,
               export: bool = True) -> tuple[Checkpoint, RunMetrics]:
    """Dense-forward training with AdamS decay on masked weights, then prune and fold.

    Returns the exported sparse checkpoint.  Raises :class:`ExportRefused`
    (carrying the unexported checkpoint and the metrics) when the final
    sparse weight ratio misses :data:`S_T_THRESHOLD`.
    """
    if plan.method != "cast":
        raise ValueError("cast_train needs method='cast'")
    steps = effective_steps(plan)
    loop = _init_loop(plan, dense_ckpt, data, steps)
    model, sp = loop.model, set(loop.model.sparsifiable)
    plan.spec.check_divisibility(plan.m_group, plan.n_scale)
    teacher_params = dense_ckpt.params
    lam = calibrate_lambda(model, loop.params, data, plan) if plan.lam is None else plan.lam
    cfg = AdamSConfig(lam, plan.beta1, plan.beta2, plan.eps, steps, plan.mask_interval)
    loop.scaling = init_scaling(model.shapes(), plan.n_scale, plan.m_group)
    states = {k: MomentState.zeros_like(v) for k, v in loop.params.items()}
    sstates = {k: MomentState.zeros_like(v) for k, v in loop.scaling.items()}
    ones = {k: np.ones_like(v) for k, v in loop.params.items() if k not in sp}
    rng = np.random.default_rng(plan.seed)
    sched = _schedule(plan, plan.lr)
    flip = 0.0

    v0 = loop.eval_row(0, NAN, 0.0, 0.0, flip)
    for t in range(1, steps + 1):
        batch = data.sample(rng, plan.batch_size)
        lr = lr_at(sched, t, steps)
        dump = lambda: _dump(dump_dir, plan, loop.params, loop.masks, loop.scaling, t - 1, rng)  # noqa: E731

        def step():
            teacher = _teacher(model, teacher_params, batch)
            loss, g = loss_and_grads(model, loop.params, batch, "kd", mode="dense",
                                     scaling=loop.scaling, teacher_out=teacher, eta=plan.eta)
            new_p, new_s, new_a, new_as = {}, {}, {}, {}
            for k, w in loop.params.items():
                mask = loop.masks[k] if k in sp else ones[k]
                new_p[k], new_s[k] = adams_step(w, g[k], mask, states[k], cfg, lr)
            for k, a in loop.scaling.items():
                new_a[k], new_as[k] = adam_step(a, g[SCALE_PREFIX + k], sstates[k], lr,
                                                plan.beta1, plan.beta2, plan.eps)
            return loss, new_p, new_s, new_a, new_as

        loss, loop.params, states, loop.scaling, sstates = _checked(step, t, dump)
        if t % plan.mask_interval == 0:
            new = {k: compute_nm_mask(loop.params[k], plan.nm) for k in model.sparsifiable}
            flip = loop.refresh(t, new)
        if t % plan.eval_every == 0 or t == steps:
            loop.eval_row(t, loss, lr, alpha_at(t, steps), flip)

    dense_final = evaluate(model, loop.params, loop.val, "dense", None, loop.scaling)
    ck = Checkpoint(plan.spec, loop.params, loop.masks, loop.scaling,
                    {**states, **{SCALE_PREFIX + k: s for k, s in sstates.items()}},
                    steps, _rng_state(rng),
                    _meta(plan, data, **{"lambda": lam}))
    s_t = loop.metrics.rows[-1]["S_t"]
    loop.metrics.summary = _summary(loop, "cast", steps, KD_FLOP_WEIGHT, {
        "lambda": lam, "start_val_ce": v0[0], "start_dense_ppl": _ppl(model, v0[1]),
        "dense_val_ce_T": dense_final,
    })
    if not export:
        return ck, loop.metrics
    if not s_t >= S_T_THRESHOLD:
        loop.metrics.summary["export"] = "refused"
        raise ExportRefused(s_t, ck, loop.metrics)
    out = final_prune_and_fold(ck)
    pruned = evaluate(model, out.params, loop.val, "dense")
    loop.metrics.summary.update({
        "export": "ok",
        "pruned_val_ce": pruned,
        "delta_val_ce": pruned - dense_final,
        "delta_val_ce_rel": abs(pruned - dense_final) / abs(dense_final),
    })
    out.meta.update({"val_ce": pruned, "S_T": s_t})
    return out, loop.metrics


def srste_train(plan: TrainPlan, dense_ckpt: Checkpoint, data, *,
                dump_dir=None) -> tuple[Checkpoint, RunMetrics]:
    """Sparse forward, straight-through gradients, SGD with ``lam * theta`` on masked weights."""
    if plan.method != "srste":
        raise ValueError("srste_train needs method='srste'")
    steps = effective_steps(plan)
    loop = _init_loop(plan, dense_ckpt, data, steps)
    model, sp = loop.model, set(loop.model.sparsifiable)
    teacher_params = dense_ckpt.params
    kind = _loss_kind(model, plan.kd)
    rng = np.random.default_rng(plan.seed)
    sched = _schedule(plan, plan.srste_lr)
    flip = 0.0

    v0 = loop.eval_row(0, NAN, 0.0, NAN, flip)
    for t in range(1, steps + 1):
        batch = data.sample(rng, plan.batch_size)
        lr = lr_at(sched, t, steps)
        dump = lambda: _dump(dump_dir, plan, loop.params, loop.masks, None, t - 1, rng)  # noqa: E731

        def step():
            teacher = _teacher(model, teacher_params, batch) if plan.kd else None
            loss, g = loss_and_grads(model, loop.params, batch, kind, mode="sparse",
                                     masks=loop.masks, teacher_out=teacher, eta=plan.eta)
            new = {}
            for k, w in loop.params.items():
                if k in sp:
                    new[k] = srste_step(w, g[k], loop.masks[k], plan.srste_lambda, lr)
                else:
                    new[k] = sgd_step(w, g[k], lr)
            return loss, new

        loss, loop.params = _checked(step, t, dump)
        if t % plan.mask_interval == 0:
            new = {k: compute_nm_mask(loop.params[k], plan.nm) for k in model.sparsifiable}
            flip = loop.refresh(t, new)
        if t % plan.eval_every == 0 or t == steps:
            loop.eval_row(t, loss, lr, NAN, flip)

    weight = KD_FLOP_WEIGHT if plan.kd else 1.0
    loop.metrics.summary = _summary(loop, "srste", steps, weight, {
        "lambda": plan.srste_lambda, "lr": plan.srste_lr, "kd": plan.kd,
        "start_val_ce": v0[0], "start_dense_ppl": _ppl(model, v0[1]),
    })
    ck = Checkpoint(plan.spec, loop.params, loop.masks, None, {}, steps, _rng_state(rng),
                    _meta(plan, data))
    out = final_prune_and_fold(ck)
    out.meta["val_ce"] = loop.metrics.rows[-1]["val_ce"]
    return out, loop.metrics


def naive_retrain(plan: TrainPlan, dense_ckpt: Checkpoint, data, *,
                  dump_dir=None) -> tuple[Checkpoint, RunMetrics]:
    """One-shot magnitude prune, frozen masks, Adam on the surviving weights only."""
    if plan.method != "naive":
        raise ValueError("naive_retrain needs method='naive'")
    steps = effective_steps(plan)
    loop = _init_loop(plan, dense_ckpt, data, steps)
    model, sp = loop.model, set(loop.model.sparsifiable)
    teacher_params = dense_ckpt.params
    kind = _loss_kind(model, plan.kd)
    states = {k: MomentState.zeros_like(v) for k, v in loop.params.items()}
    rng = np.random.default_rng(plan.seed)
    sched = _schedule(plan, plan.lr)
    frozen = loop.masks

    v0 = loop.eval_row(0, NAN, 0.0, NAN, 0.0)
    for t in range(1, steps + 1):
        batch = data.sample(rng, plan.batch_size)
        lr = lr_at(sched, t, steps)
        dump = lambda: _dump(dump_dir, plan, loop.params, loop.masks, None, t - 1, rng)  # noqa: E731

        def step():
            teacher = _teacher(model, teacher_params, batch) if plan.kd else None
            loss, g = loss_and_grads(model, loop.params, batch, kind, mode="sparse",
                                     masks=frozen, teacher_out=teacher, eta=plan.eta)
            new_p, new_s = {}, {}
            for k, w in loop.params.items():
                gk = g[k] * frozen[k] if k in sp else g[k]
                new_p[k], new_s[k] = adam_step(w, gk, states[k], lr, plan.beta1, plan.beta2, plan.eps)
                if k in sp:
                    # masked entries keep their exact values
                    new_p[k] = np.where(frozen[k] == 0, w, new_p[k])
            return loss, new_p, new_s

        loss, loop.params, states = _checked(step, t, dump)
        if t % plan.mask_interval == 0:
            loop.refresh(t, frozen)
        if t % plan.eval_every == 0 or t == steps:
            loop.eval_row(t, loss, lr, NAN, 0.0)

    weight = KD_FLOP_WEIGHT if plan.kd else 1.0
    loop.metrics.summary = _summary(loop, "naive", steps, weight, {
        "kd": plan.kd, "start_val_ce": v0[0], "start_dense_ppl": _ppl(model, v0[1]),
    })
    ck = Checkpoint(plan.spec, loop.params, frozen, None, {}, steps, _rng_state(rng),
                    _meta(plan, data))
    out = final_prune_and_fold(ck)
    out.meta["val_ce"] = loop.metrics.rows[-1]["val_ce"]
    return out, loop.metrics


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def final_prune_and_fold(ck: Checkpoint) -> Checkpoint:
    """``W <- fold(W * M, A)`` on every masked layer; scaling and optimizer state are dropped.

    Masks are kept so the exported model can still be evaluated in sparse
    mode.  Idempotent.
    """
    if ck.masks is None:
        raise ValueError("checkpoint has no masks to prune with")
    cfg = NMConfig(ck.meta.get("n_keep", 2), ck.meta.get("m_group", 4))
    params = dict(ck.params)
    for k, m in ck.masks.items():
        res = validate_mask(m, cfg)
        if not res:
            raise ValueError(f"invalid mask for {k}: group {res.first_bad} keeps {res.group_sum}")
        w = params[k] * m
        if ck.scaling is not None and k in ck.scaling:
            w = fold_scaling(w, ck.scaling[k])
        params[k] = w
    meta = dict(ck.meta, exported=True)
    return Checkpoint(ck.spec, params, {k: np.array(m) for k, m in ck.masks.items()}, None, {},
                      ck.step, ck.rng_state, meta)


def check_exported(ck: Checkpoint, cfg: NMConfig = NMConfig()) -> bool:
    """Masks valid, no scaling left, and nonzeros only where the masks keep entries."""
    if ck.masks is None or ck.scaling is not None:
        return False
    for k, m in ck.masks.items():
        if not validate_mask(m, cfg):
            return False
        if ((ck.params[k] != 0) & (m == 0)).any():
            return False
    return True


# --------------------------------------------------------------------------
# straight-through gradient error probe
# --------------------------------------------------------------------------

@dataclass
class SteProbe:
    abs_theta: np.ndarray
    delta: np.ndarray
    slope: float
    intercept: float
    pearson: float

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("abs_theta,delta\n")
        for a, d in zip(self.abs_theta, self.delta):
            out.write(f"{_fmt(a)},{_fmt(d)}\n")
        return out.getvalue()


def ste_error(grad_fn: Callable[[dict], Mapping[str, np.ndarray]], params: Mapping[str, np.ndarray],
              masks: Mapping[str, np.ndarray], lam: float) -> SteProbe:
    """``Delta = |g(theta) - g(theta * m) - lam * theta|`` on every masked entry.

    ``grad_fn`` maps a parameter dict to the dense-forward gradient; the
    straight-through gradient is the same function evaluated at the pruned
    weights.
    """
    dense = grad_fn(dict(params))
    pruned = {k: (v * masks[k] if k in masks else v) for k, v in params.items()}
    sparse = grad_fn(pruned)
    th, dl = [], []
    for k, m in masks.items():
        sel = np.asarray(m) == 0
        w = np.asarray(params[k], dtype=np.float64)
        d = np.abs(np.asarray(dense[k]) - np.asarray(sparse[k]) - lam * w)
        th.append(np.abs(w)[sel].ravel())
        dl.append(d[sel].ravel())
    x, y = np.concatenate(th), np.concatenate(dl)
    if x.size >= 2 and x.std() > 0 and y.std() > 0:
        slope, intercept = np.polyfit(x, y, 1)
        r = float(np.corrcoef(x, y)[0, 1])
    elif x.size and x.std() > 0:
        slope, intercept, r = 0.0, float(y.mean()), NAN
    else:
        slope, intercept, r = NAN, NAN, NAN
    return SteProbe(x, y, float(slope), float(intercept), r)


def ste_error_probe(model, params, masks, batch, lam: float, loss_kind: str | None = None) -> SteProbe:
    """:func:`ste_error` on a model: dense-forward gradient of the batch loss."""
    kind = loss_kind or _loss_kind(model, False)

    def grad_fn(p):
        return loss_and_grads(model, p, batch, kind, mode="dense")[1]

    return ste_error(grad_fn, params, masks, lam)
