import numpy as np
import pytest

from symplectic_adjoint import StepController, builtin_problem, builtin_tableau


def rel_inf(a, b):
    """Relative l-infinity difference of ``a`` against reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def central_diff(fn, x, step_scale=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = step_scale * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


@pytest.fixture
def dopri5():
    return builtin_tableau("dopri5")


@pytest.fixture
def adaptive():
    return StepController.adaptive(atol=1e-8, rtol=1e-6)


@pytest.fixture
def mlp_problem():
    return builtin_problem("mlp_node")
