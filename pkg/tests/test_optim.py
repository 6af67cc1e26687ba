import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from castlab.optim import (AdamSConfig, MomentState, Schedule, adam_l1_step, adam_step, adams_step,
                           adamw_l1_step, alpha_at, lr_at, sgd_step, srste_step)
from castlab.tensor import NonFiniteError


# ---------------------------------------------------------------------------
# scalar references, written from the update equations with plain floats
# ---------------------------------------------------------------------------

def sgn(x):
    x = float(x)
    return (x > 0) - (x < 0)


def ref_adams(theta, g, masked, m, v, t, lam, T, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    mt = (1 - t / T) * m + (t / T) * lam * sgn(theta) if masked else m
    v = b2 * v + (1 - b2) * mt * mt
    mhat = mt / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return theta - lr * mhat / (math.sqrt(vhat) + eps), m, v


def ref_adam(theta, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    return theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps), m, v


def ref_adam_l1(theta, g, masked, m, v, t, lam, lr):
    gt = g + lam * sgn(theta) if masked else g
    return ref_adam(theta, gt, m, v, t, lr)


def ref_adamw_l1(theta, g, masked, m, v, t, lam, lr):
    new, m, v = ref_adam(theta, g, m, v, t, lr)
    return (new - lr * lam * sgn(theta) if masked else new), m, v


def ref_srste(theta, g, masked, lam, lr):
    return theta - lr * (g + (lam * theta if masked else 0.0))


def _state(m=0.0, v=0.0, t=0):
    return MomentState(np.array(m), np.array(v), t)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------

def test_adams_unmasked_first_step():
    cfg = AdamSConfig(lam=0.2, total_steps=10)
    new, st_ = adams_step(0.5, 0.1, 1, _state(), cfg, 0.1)
    assert float(new) == pytest.approx(-0.5, abs=1e-5)
    assert float(new) == pytest.approx(ref_adams(0.5, 0.1, False, 0, 0, 1, 0.2, 10, 0.1)[0], abs=1e-9)
    assert st_.t == 1


def test_adams_masked_first_step():
    cfg = AdamSConfig(lam=0.2, total_steps=10)  # alpha = 1/10
    new, st_ = adams_step(0.5, 0.1, 0, _state(), cfg, 0.1)
    assert float(st_.m) == pytest.approx(0.01)
    assert float(new) == pytest.approx(-0.49999966, abs=1e-8)
    assert float(new) == pytest.approx(ref_adams(0.5, 0.1, True, 0, 0, 1, 0.2, 10, 0.1)[0], abs=1e-9)


def test_adam_l1_example():
    new, _ = adam_l1_step(1.0, 0.0, 0, _state(), lam=0.01, lr=0.1)
    assert float(new) == pytest.approx(0.9, abs=1e-6)


def test_adamw_l1_examples():
    new, _ = adamw_l1_step(1.0, 0.0, 0, _state(), lam=0.01, lr=0.1)
    assert float(new) == pytest.approx(0.999, abs=1e-12)
    new, _ = adamw_l1_step(-1.0, 0.0, 0, _state(), lam=0.01, lr=0.1)
    assert float(new) == pytest.approx(-0.999, abs=1e-12)


def test_srste_examples():
    assert float(srste_step(1.0, 0.0, 0, 0.01, 0.1)) == pytest.approx(0.999, abs=1e-15)
    assert float(srste_step(1.0, 0.3, 0, 0.0, 0.1)) == pytest.approx(0.97, abs=1e-15)
    # unmasked entries ignore the decay
    assert float(srste_step(1.0, 0.0, 1, 0.5, 0.1)) == 1.0


def test_alpha_examples():
    assert alpha_at(0, 10) == 0.0
    assert alpha_at(10, 10) == 1.0
    assert alpha_at(750, 7500) == 0.1
    with pytest.raises(ValueError):
        alpha_at(1, 0)


def test_lr_schedule():
    const = Schedule("constant", 2e-5)
    assert all(lr_at(const, t, 100) == 2e-5 for t in range(101))
    cos = Schedule("cosine", 1e-3, warmup=10)
    assert lr_at(cos, 5, 100) == pytest.approx(5e-4)
    assert lr_at(cos, 10, 100) == pytest.approx(1e-3)
    assert lr_at(cos, 100, 100) == pytest.approx(1e-4)
    lrs = [lr_at(cos, t, 100) for t in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        Schedule("linear", 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        AdamSConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AdamSConfig(lam=-1.0)
    with pytest.raises(ValueError):
        AdamSConfig(total_steps=0)


# ---------------------------------------------------------------------------
# multi-step agreement with the scalar references
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_all_rules_match_references_over_trajectories(seed):
    rng = np.random.default_rng(seed)
    T, lam, lr = 40, 0.05, 0.01
    theta0 = rng.standard_normal(6)
    masks = (rng.random(6) < 0.5).astype(float)
    grads = rng.standard_normal((T, 6)) * 0.1
    cfg = AdamSConfig(lam=lam, total_steps=T)

    runs = {}
    for name in ("adams", "adam_l1", "adamw_l1"):
        th, st_ = theta0.copy(), MomentState.zeros_like(theta0)
        for t in range(T):
            if name == "adams":
                th, st_ = adams_step(th, grads[t], masks, st_, cfg, lr)
            elif name == "adam_l1":
                th, st_ = adam_l1_step(th, grads[t], masks, st_, lam, lr)
            else:
                th, st_ = adamw_l1_step(th, grads[t], masks, st_, lam, lr)
        runs[name] = th
    th = theta0.copy()
    for t in range(T):
        th = srste_step(th, grads[t], masks, lam, lr)
    runs["srste"] = th

    for i in range(6):
        masked = masks[i] == 0
        refs = {}
        for name, fn in (("adams", ref_adams), ("adam_l1", ref_adam_l1), ("adamw_l1", ref_adamw_l1)):
            x, m, v = theta0[i], 0.0, 0.0
            for t in range(1, T + 1):
                if name == "adams":
                    x, m, v = fn(x, grads[t - 1, i], masked, m, v, t, lam, T, lr)
                else:
                    x, m, v = fn(x, grads[t - 1, i], masked, m, v, t, lam, lr)
            refs[name] = x
        x = theta0[i]
        for t in range(T):
            x = ref_srste(x, grads[t, i], masked, lam, lr)
        refs["srste"] = x
        for name in refs:
            assert abs(runs[name][i] - refs[name]) <= 1e-9, name


# ---------------------------------------------------------------------------
# reductions and properties
# ---------------------------------------------------------------------------

def mu_driven_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam whose second moment tracks the momentum instead of the raw gradient."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * m * m
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adams_zero_lambda_is_mu_driven_adam():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(20)
    cfg = AdamSConfig(lam=0.0, total_steps=50)
    x, st_ = 0.4, _state()
    for g in grads:
        x, st_ = adams_step(x, g, 1, st_, cfg, 0.01)
    assert float(x) == pytest.approx(mu_driven_adam(0.4, grads, 0.01), abs=1e-12)
    # masked entries still follow the blend, which with lam = 0 scales the momentum by 1 - t/T
    x, st_ = 0.4, _state()
    for g in grads:
        x, st_ = adams_step(x, g, 0, st_, cfg, 0.01)
    r, m, v = 0.4, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        r, m, v = ref_adams(r, g, True, m, v, t, 0.0, 50, 0.01)
    assert float(x) == pytest.approx(r, abs=1e-12)


def test_adams_zero_lambda_zero_beta1_is_textbook_adam():
    rng = np.random.default_rng(1)
    cfg0 = AdamSConfig(lam=0.0, beta1=0.0, total_steps=50)
    th_a = th_b = np.array([0.3, -0.7])
    sa = sb = MomentState.zeros_like(th_a)
    for _ in range(10):
        g = rng.standard_normal(2)
        th_a, sa = adams_step(th_a, g, np.ones(2), sa, cfg0, 0.01)
        th_b, sb = adam_step(th_b, g, sb, 0.01, beta1=0.0)
    np.testing.assert_array_equal(th_a, th_b)


def test_l1_variants_reduce_to_adam_when_lambda_zero_or_unmasked():
    rng = np.random.default_rng(1)
    th = rng.standard_normal(5)
    g = rng.standard_normal(5)
    st_ = MomentState.zeros_like(th)
    ref, _ = adam_step(th, g, st_, 0.01)
    for fn in (adam_l1_step, adamw_l1_step):
        np.testing.assert_array_equal(fn(th, g, np.zeros(5), st_, 0.0, 0.01)[0], ref)
        np.testing.assert_array_equal(fn(th, g, np.ones(5), st_, 0.3, 0.01)[0], ref)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-1, 1), st.floats(-1, 1))
def test_unmasked_update_independent_of_lambda(lam, theta, g):
    cfg_a = AdamSConfig(lam=lam, total_steps=5)
    cfg_b = AdamSConfig(lam=0.0, total_steps=5)
    a, _ = adams_step(theta, g, 1, _state(), cfg_a, 0.01)
    b, _ = adams_step(theta, g, 1, _state(), cfg_b, 0.01)
    assert float(a) == float(b)
    assert float(srste_step(theta, g, 1, lam, 0.1)) == float(srste_step(theta, g, 1, 0.0, 0.1))


def test_adamw_decay_displacement_is_exactly_lr_lambda():
    rng = np.random.default_rng(2)
    st_a = st_b = _state()
    x = 1.0
    for _ in range(20):
        g = float(rng.standard_normal())
        with_decay, st_a2 = adamw_l1_step(x, g, 0, st_a, 0.01, 0.1)
        without, _ = adamw_l1_step(x, g, 0, st_a, 0.0, 0.1)
        assert float(without - with_decay) == pytest.approx(0.1 * 0.01, abs=1e-15)
        x, st_a = float(with_decay), st_a2
    # adam_l1 normalizes the decay through the second moment instead
    a, _ = adam_l1_step(1.0, 0.0, 0, _state(), 0.01, 0.1)
    assert 1.0 - float(a) == pytest.approx(0.1, abs=1e-6)


def test_adams_pure_decay_shrinks_and_stays_bounded():
    lr, T = 1e-3, 4000
    cfg = AdamSConfig(lam=0.01, total_steps=T)
    x, st_ = np.array(0.5), _state()
    traj = []
    for _ in range(T):
        x, st_ = adams_step(x, 0.0, 0, st_, cfg, lr)
        traj.append(abs(float(x)))
    traj = np.array(traj)
    # the first step moves by lr / (1 - beta1); from then on every step moves by at most that
    bound = lr / (1 - cfg.beta1)
    big = traj[:-1] > bound
    assert (traj[1:][big] < traj[:-1][big]).all()
    entered = int(np.argmax(traj <= bound))
    assert traj[entered] <= bound and (traj[entered:] <= bound).all()
    assert np.isfinite(traj).all()


def test_adam_properties():
    new, _ = adam_step(0.3, 5.0, _state(), 0.01)
    assert abs(0.3 - float(new)) == pytest.approx(0.01, rel=1e-6)
    x, st_ = 0.3, _state()
    for _ in range(10):
        x, st_ = adam_step(x, 0.0, st_, 0.01)
    assert float(x) == 0.3
    x, st_ = 1.0, _state()
    for _ in range(500):
        x, st_ = adam_step(x, 2 * float(x), st_, 0.05)
    assert abs(float(x)) < 1e-3


def test_non_finite_gradient_rejected():
    cfg = AdamSConfig(total_steps=2)
    with pytest.raises(NonFiniteError):
        adams_step(1.0, float("nan"), 0, _state(), cfg, 0.1)
    with pytest.raises(NonFiniteError):
        srste_step(1.0, float("inf"), 0, 0.1, 0.1)
    with pytest.raises(NonFiniteError):
        sgd_step(1.0, float("nan"), 0.1)
