"""Acceptance criteria A1-A11, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and then
asserts the criterion at its stated tolerance.  The long toy runs are shared
through :mod:`acceptance_runs` and cached on disk.
"""
import subprocess
import sys
import time

import numpy as np
import pytest

from castlab import tensor as T
from castlab.nn import ModelSpec, build_model, forward_lm, perplexity, value_and_grad
from castlab.optim import AdamSConfig, MomentState, adam_l1_step, adams_step, adamw_l1_step, srste_step
from castlab.scaling import init_scaling
from castlab.scalinglaw import bundled_points, fit_token_law, leave_one_out
from castlab.sparsity import compute_nm_mask, one_shot_magnitude_prune, validate_mask
from castlab.trainer import (S_T_THRESHOLD, evaluate, final_prune_and_fold, ste_error,
                             ste_error_probe)

import acceptance_runs as runs
from acceptance_runs import report
from test_nn import _check_model_grads, _lm_batch, _mlp_batch
from test_optim import ref_adam_l1, ref_adams, ref_adamw_l1, ref_srste
from test_sparsity import adversarial, full_sort_oracle
from test_tensor import FD_PRIMITIVES, _case

from conftest import TINY_LM, TINY_MLP, assert_grad_matches_fd

pytestmark = pytest.mark.acceptance


def _val():
    return runs.data().validation(64)


def _final_ce(method, seed):
    """Validation CE of the exported sparse model (dense forward of the pruned, folded weights)."""
    ck, _ = runs.sparse(method, seed)
    if method == "cast":
        ck = final_prune_and_fold(ck)
    return evaluate(build_model(ck.spec), ck.params, _val(), "dense")


# --------------------------------------------------------------------------


def test_a1_scaling_law_fits():
    t0 = time.perf_counter()
    want = {"2-7b": (1.561, 0.258, 0.98), "2-13b": (1.437, 0.263, 0.98), "3-8b": (1.693, 0.438, 0.97)}
    fits = {name: fit_token_law(bundled_points(name)) for name in want}
    dt = time.perf_counter() - t0
    ok = dt < 1.0
    parts = []
    for name, (a, b, r2) in want.items():
        f = fits[name]
        ok &= abs(f.a - a) <= 0.01 and abs(f.b - b) <= 0.01 and f.r2 >= r2
        parts.append(f"{name}: A={f.a:.4f} B={f.b:.4f} R2={f.r2:.4f}")
    report("A1", ok, "; ".join(parts) + f"; {dt * 1e3:.1f} ms")
    assert ok


def test_a2_leave_one_out():
    t0 = time.perf_counter()
    preds = {name: leave_one_out(bundled_points(name))[0] for name in ("2-7b", "3-8b")}
    dt = time.perf_counter() - t0
    ok = (dt < 1.0 and preds["2-7b"].tokens == preds["3-8b"].tokens == 40
          and abs(preds["2-7b"].predicted_ppl - 5.23) <= 0.02
          and abs(preds["3-8b"].predicted_ppl - 6.34) <= 0.02)
    report("A2", ok, f"held-out 40B: 2-7b {preds['2-7b'].predicted_ppl:.4f}, "
                     f"3-8b {preds['3-8b'].predicted_ppl:.4f}; {dt * 1e3:.1f} ms")
    assert ok


def test_a3_gradient_correctness():
    t0 = time.perf_counter()
    failures = []
    for seed in range(20):
        for name in FD_PRIMITIVES:
            params, fn = _case(name, np.random.default_rng(seed))
            try:
                assert_grad_matches_fd(fn, params, rtol=1e-4, atol=1e-8)
            except AssertionError:
                failures.append(f"{name}[{seed}]")
        # ste_mask has no finite-difference derivative by design; its contract is that the
        # gradient equals the dense gradient evaluated at the masked weights
        srng = np.random.default_rng(seed)
        w, r = srng.standard_normal((3, 8)), srng.standard_normal((3, 8))
        mask = compute_nm_mask(w)
        _, g_ste = value_and_grad(lambda p: T.tsum(T.mul(T.gelu(T.ste_mask(p["w"], mask)), r)), {"w": w})
        _, g_at = value_and_grad(lambda p: T.tsum(T.mul(T.gelu(p["w"]), r)), {"w": w * mask})
        if not np.array_equal(g_ste["w"], g_at["w"]):
            failures.append(f"ste_mask[{seed}]")
        rng = np.random.default_rng(seed)
        for base, batch_fn, kind in ((TINY_LM, _lm_batch, "kd"), (TINY_MLP, _mlp_batch, "mse")):
            spec = ModelSpec(**{**base.to_dict(), "seed": seed})
            model = build_model(spec)
            params = model.init_params()
            batch = batch_fn(spec, rng)
            scaling = {k: 1 + 0.2 * rng.standard_normal(v.shape)
                       for k, v in init_scaling(model.shapes()).items()}
            kw = dict(loss_kind=kind, scaling=scaling)
            if kind == "kd":
                kw.update(teacher_out=forward_lm(model, params, batch.inputs), eta=2 / 3)
                params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
            try:
                _check_model_grads(model, params, batch, rng, **kw)
            except AssertionError:
                failures.append(f"{spec.family}[{seed}]")
    dt = time.perf_counter() - t0
    ok = not failures and dt < 120
    report("A3", ok, f"{len(FD_PRIMITIVES) + 1} primitives + 2 model families x 20 seeds, "
                     f"float64, rtol 1e-4 atol 1e-8; failures: {failures or 'none'}; {dt:.1f} s")
    assert ok


def test_a4_lossless_final_prune():
    raw, m = runs.sparse("cast", 0)
    model = build_model(raw.spec)
    val = _val()
    out = final_prune_and_fold(raw)
    s_t = m.rows[-1]["S_t"]
    before = evaluate(model, raw.params, val, "dense", None, raw.scaling)
    after = evaluate(model, out.params, val, "dense")
    rel = abs(after - before) / abs(before)
    masks_ok = all(bool(validate_mask(out.masks[k])) for k in model.sparsifiable)
    zeros_ok = all(((out.params[k] != 0) <= (out.masks[k] == 1)).all() for k in model.sparsifiable)
    x = val.inputs[:8]
    fold_gap = float(np.abs(forward_lm(model, raw.params, x, "sparse", raw.masks, raw.scaling)
                            - forward_lm(model, out.params, x, "dense")).max())
    elapsed = m.summary.get("elapsed_s", float("nan"))
    ok = (s_t >= S_T_THRESHOLD and rel <= 1e-3 and masks_ok and zeros_ok and fold_gap <= 1e-12
          and elapsed < 1200)
    report("A4", ok, f"S_T={s_t:.6f} |dValCE|/ValCE={rel:.2e} (CE {before:.5f} -> {after:.5f}) "
                     f"masks valid={masks_ok} fold gap={fold_gap:.1e} lambda={m.summary['lambda']:.3e} "
                     f"run {elapsed:.0f} s")
    assert ok


def test_a5_method_ordering():
    ce = {meth: [_final_ce(meth, s) for s in runs.SEEDS] for meth in ("cast", "srste", "naive")}
    mean = {k: float(np.mean(v)) for k, v in ce.items()}
    budgets = {meth: runs.sparse(meth, 0)[1].summary["budget"] for meth in ce}
    per_seed = all(c < n for c, n in zip(ce["cast"], ce["naive"]))
    # the shared dense pretrain counts toward the budget too
    elapsed = runs.dense()[1].summary.get("elapsed_s", 0.0) + sum(
        runs.sparse(meth, s)[1].summary.get("elapsed_s", 0.0) for meth in ce for s in runs.SEEDS)
    ok = mean["cast"] < mean["srste"] < mean["naive"] and per_seed and elapsed < 7200
    detail = "; ".join(f"{k} mean {mean[k]:.4f} {[round(v, 4) for v in ce[k]]}" for k in ce)
    report("A5", ok, f"{detail}; CAST<naive every seed={per_seed}; budgets {budgets}; "
                     f"pretrain + runs {elapsed / 60:.0f} min")
    assert ok


def test_a6_dense_forward_probe():
    dense_ck, _ = runs.dense()
    base = perplexity(evaluate(build_model(dense_ck.spec), dense_ck.params, _val()))
    _, cast_m = runs.sparse("cast", 0)
    _, srste_m = runs.sparse("srste", 0)
    cast_ratio = float(np.max(np.abs(cast_m.column("dense_ppl") / base - 1.0)))
    s = srste_m.column("dense_ppl")
    srste_ratio = float(s[-1] / s[0])
    ok = cast_ratio <= 0.05 and srste_ratio >= 1.2
    report("A6", ok, f"dense ppl {base:.4f}; CAST max deviation {cast_ratio:.2%}; "
                     f"SR-STE dense ppl {s[0]:.3f} -> {s[-1]:.3f} (x{srste_ratio:.3f})")
    assert ok


def test_a7_mask_dynamics():
    _, cast_m = runs.sparse("cast", 0)
    _, srste_m = runs.sparse("srste", 0)
    c, s = cast_m.summary, srste_m.summary
    ok = (c["mag_at_last_flip"] > s["mag_at_last_flip"]
          and c["flip_rate_last10"] < c["flip_rate_first10"])
    report("A7", ok, f"magnitude at flip CAST {c['mag_at_last_flip']:.4g} vs SR-STE "
                     f"{s['mag_at_last_flip']:.4g}; CAST flip rate first 10% {c['flip_rate_first10']:.4g} "
                     f"last 10% {c['flip_rate_last10']:.4g}")
    assert ok


def test_a8_ste_error_probe():
    t0 = time.perf_counter()
    scalar = ste_error(lambda p: {"t": p["t"] - 2.0}, {"t": np.array(0.5)}, {"t": np.array(0.0)}, 0.1)
    scalar_err = abs(float(scalar.delta[0]) - 0.45)
    dense_ck, _ = runs.dense()
    model = build_model(dense_ck.spec)
    masks = one_shot_magnitude_prune({k: dense_ck.params[k] for k in model.sparsifiable})
    lam = runs.sparse("srste", 0)[1].summary["lambda"]
    probe = ste_error_probe(model, dense_ck.params, masks, _val(), lam)
    dt = time.perf_counter() - t0
    ok = scalar_err <= 1e-12 and probe.pearson > 0.5 and probe.slope > 0 and dt < 300
    report("A8", ok, f"scalar |Delta-0.45|={scalar_err:.1e}; toy transformer ({probe.delta.size} masked "
                     f"entries, lambda={lam:g}) pearson={probe.pearson:.4f} slope={probe.slope:.3e}; "
                     f"{dt:.1f} s")
    assert ok


def test_a9_optimizer_oracles():
    t0 = time.perf_counter()
    st0 = MomentState(np.array(0.0), np.array(0.0), 0)
    checks = {
        "adams unmasked": (float(adams_step(0.5, 0.1, 1, st0, AdamSConfig(0.2, total_steps=10), 0.1)[0]),
                           ref_adams(0.5, 0.1, False, 0, 0, 1, 0.2, 10, 0.1)[0]),
        "adams masked": (float(adams_step(0.5, 0.1, 0, st0, AdamSConfig(0.2, total_steps=10), 0.1)[0]),
                         ref_adams(0.5, 0.1, True, 0, 0, 1, 0.2, 10, 0.1)[0]),
        "adam_l1": (float(adam_l1_step(1.0, 0.0, 0, st0, 0.01, 0.1)[0]),
                    ref_adam_l1(1.0, 0.0, True, 0, 0, 1, 0.01, 0.1)[0]),
        "adamw_l1 +": (float(adamw_l1_step(1.0, 0.0, 0, st0, 0.01, 0.1)[0]),
                       ref_adamw_l1(1.0, 0.0, True, 0, 0, 1, 0.01, 0.1)[0]),
        "adamw_l1 -": (float(adamw_l1_step(-1.0, 0.0, 0, st0, 0.01, 0.1)[0]),
                       ref_adamw_l1(-1.0, 0.0, True, 0, 0, 1, 0.01, 0.1)[0]),
        "srste": (float(srste_step(1.0, 0.0, 0, 0.01, 0.1)), ref_srste(1.0, 0.0, True, 0.01, 0.1)),
    }
    published = {"adams unmasked": -0.5, "adams masked": -0.49999966, "adam_l1": 0.9,
                 "adamw_l1 +": 0.999, "adamw_l1 -": -0.999, "srste": 0.999}
    worst = max(abs(a - b) for a, b in checks.values())
    worked = max(abs(checks[k][0] - v) for k, v in published.items())
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and worked <= 1e-5 and dt < 1.0
    report("A9", ok, f"max |impl - scalar reference| {worst:.1e}; max |impl - worked value| "
                     f"{worked:.1e}; {dt * 1e3:.1f} ms")
    assert ok


def test_a10_mask_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        w = adversarial(rng, (8, 16))
        mask = compute_nm_mask(w)
        if not validate_mask(mask) or not np.array_equal(mask, full_sort_oracle(w, 2, 4)):
            bad += 1
    inv_bad = 0
    for _ in range(200):
        w = rng.standard_normal((8, 16))
        base = compute_nm_mask(w)
        for c in (np.exp(rng.uniform(-7, 7)), 2.0 ** int(rng.integers(-30, 30))):
            inv_bad += not np.array_equal(compute_nm_mask(c * w), base)
        t = adversarial(rng, (8, 16))
        inv_bad += not np.array_equal(compute_nm_mask(np.ldexp(t, 5)), compute_nm_mask(t))
    dt = time.perf_counter() - t0
    ok = bad == 0 and inv_bad == 0 and dt < 10
    report("A10", ok, f"1000 adversarial 8x16 matrices: {bad} mismatches; scale invariance: "
                      f"{inv_bad} violations in 600 cases; {dt:.2f} s")
    assert ok


def test_a11_determinism(tmp_path):
    def invoke(run):
        # identical relative paths, so the echoed configs match too
        run.mkdir()
        common = ["--steps", "100", "--eval-every", "50", "--lambda-batches", "5", "--seed", "0",
                  "--corpus-bytes", "200000"]
        cmds = [
            ["pretrain", *common, "--out", "dense"],
            ["sparsify", *common, "--method", "cast", "--checkpoint", "dense/checkpoints/dense.ckpt",
             "--out", "cast"],
        ]
        codes = [subprocess.run([sys.executable, "-m", "castlab", *c], cwd=run, capture_output=True).returncode
                 for c in cmds]
        files = {p.relative_to(run): p.read_bytes() for p in sorted(run.rglob("*")) if p.is_file()}
        return codes, files

    codes_a, a = invoke(tmp_path / "a")
    codes_b, b = invoke(tmp_path / "b")
    same = codes_a == codes_b and a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    n_ckpt = sum(1 for k in a if k.suffix == ".ckpt")
    ok = same and codes_a[0] == 0 and codes_a[1] in (0, 3) and n_ckpt >= 2
    report("A11", ok, f"two CLI invocations (pretrain + cast sparsify, exit codes {codes_a}): "
                      f"{len(a)} files incl. {n_ckpt} checkpoints byte-identical={same}")
    assert ok
