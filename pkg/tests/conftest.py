import numpy as np
import pytest

from castlab import tensor as T
from castlab.nn import ModelSpec, value_and_grad

TINY_LM = ModelSpec(family="tiny-transformer", vocab_size=8, d_model=8, n_heads=2,
                    n_layers=1, context=4, seed=0)
TINY_MLP = ModelSpec(family="mlp", widths=(8, 16, 8, 3), seed=0)


def fd_on_coords(f, params, coords, h=1e-5):
    """Central differences of ``f(params)`` at selected ``(name, flat_index)`` coordinates."""
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = []
    for name, i in coords:
        flat = work[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = f(work)
        flat[i] = orig - h
        fm = f(work)
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def sample_coords(params, rng, per_tensor=None):
    coords = []
    for k, v in params.items():
        n = np.size(v)
        if per_tensor is None or n <= per_tensor:
            idx = range(n)
        else:
            idx = rng.choice(n, size=per_tensor, replace=False)
        coords += [(k, int(i)) for i in idx]
    return coords


def assert_grad_matches_fd(fn, params, rng=None, per_tensor=None, rtol=1e-4, atol=1e-8):
    """Reverse-mode gradient of ``fn(tensor_dict)`` against central differences."""
    rng = rng or np.random.default_rng(0)
    _, grads = value_and_grad(fn, params)

    def f(p):
        return float(fn({k: T.Tensor(v) for k, v in p.items()}).data)

    coords = sample_coords(params, rng, per_tensor)
    fd = fd_on_coords(f, params, coords)
    auto = np.array([grads[k].reshape(-1)[i] for k, i in coords])
    np.testing.assert_allclose(auto, fd, rtol=rtol, atol=atol)


@pytest.fixture
def tiny_lm_spec():
    return TINY_LM


@pytest.fixture
def tiny_mlp_spec():
    return TINY_MLP


def pytest_terminal_summary(terminalreporter):
    import acceptance_runs

    if acceptance_runs.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_runs.RESULTS:
            terminalreporter.write_line(line)
