import numpy as np
import pytest

from advda import autodiff as ad


def fd_param_gradient(root, params, name, step=1e-5):
    """Central finite differences of a scalar graph w.r.t. one parameter."""
    base = params.value(name).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * step
            params.set_value(name, bumped.reshape(base.shape))
            val = float(ad.evaluate(root))
            grad.reshape(-1)[i] += sign * val / (2.0 * step)
    params.set_value(name, base)
    ad.evaluate(root)
    return grad


def fd_all_gradients(root, params, step=1e-5):
    return {n: fd_param_gradient(root, params, n, step)
            for n in params.trainable_names()}


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
