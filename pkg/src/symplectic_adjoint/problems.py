"""Benchmark problems with closed-form oracles where one exists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import DynamicsFunction, MlpDynamics, UnknownProblem, analytic_dynamics
from .engines import LossSpec
from .solver import StepController
from .tableau import ButcherTableau, builtin_tableau

__all__ = ["PROBLEM_NAMES", "Problem", "builtin_problem", "default_controller", "default_tableau", "expm"]


@dataclass
class Problem:
    name: str
    dynamics: DynamicsFunction
    x0: np.ndarray
    theta0: np.ndarray
    t_span: tuple[float, float]
    loss: LossSpec
    oracle: Callable[[], tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None
    theta_target: np.ndarray | None = None
    seed: int = 0


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    A = np.asarray(A, dtype=float)
    norm = np.linalg.norm(A, 1)
    k = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0.5 else 0
    B = A / 2.0**k
    term = np.eye(A.shape[0])
    out = term.copy()
    for j in range(1, 25):
        term = term @ B / j
        out = out + term
    for _ in range(k):
        out = out @ out
    return out


def _decay(seed: int) -> Problem:
    f = analytic_dynamics("decay", {"d": 1})
    x0 = np.array([1.0])
    theta = np.array([-0.5])
    T = 1.0

    def oracle():
        e = np.exp(theta[0] * T)
        return x0 * e, np.array([e]), np.array([x0[0] * T * e])

    return Problem("decay", f, x0, theta, (0.0, T), LossSpec.total(), oracle, np.array([-0.7]), seed)


def _rotation(seed: int) -> Problem:
    f = analytic_dynamics("rotation")
    x0 = np.array([1.0, 0.0])

    def oracle():
        return x0.copy(), np.zeros(2), np.zeros(1)

    return Problem("rotation", f, x0, np.array([1.0]), (0.0, 2 * np.pi), LossSpec.squared_error(x0), oracle,
                   np.array([1.1]), seed)


def _linear_nd(seed: int) -> Problem:
    d = 3
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 0.5, size=(d, d)) - 0.5 * np.eye(d)
    x0 = rng.normal(size=d)
    c = rng.normal(size=d)
    T = 1.0
    f = analytic_dynamics("linear", {"d": d})

    def oracle():
        xT = expm(A * T) @ x0
        gx = expm(A.T * T) @ c
        # Frechet derivative of c^T expm(A T) x0 w.r.t. A via the block-triangular exponential
        big = np.zeros((2 * d, 2 * d))
        big[:d, :d] = A.T * T
        big[d:, d:] = A.T * T
        big[:d, d:] = np.outer(c, x0) * T
        gA = expm(big)[:d, d:]
        return xT, gx, gA.ravel()

    target = (A + 0.1 * rng.normal(size=(d, d))).ravel()
    return Problem("linear_nd", f, x0, A.ravel(), (0.0, T), LossSpec.linear(c), oracle, target, seed)


def _mlp_node(seed: int) -> Problem:
    f = MlpDynamics([4, 16, 4])
    rng = np.random.default_rng(seed)
    theta = f.init_params(seed)
    x0 = rng.normal(size=4)
    target = theta + 0.1 * np.random.default_rng(seed + 1).normal(size=f.m)
    return Problem("mlp_node", f, x0, theta, (0.0, 1.0), LossSpec.squared_error(np.zeros(4), 0.5), None,
                   target, seed)


def kdv_toy_matrix(d: int = 16, length: float = 2 * np.pi) -> np.ndarray:
    """Skew-symmetric periodic central-difference operator on ``d`` points."""
    dx = length / d
    G = np.zeros((d, d))
    for i in range(d):
        G[i, (i + 1) % d] = 1.0 / (2 * dx)
        G[i, (i - 1) % d] = -1.0 / (2 * dx)
    return G


def kdv_energy(x, theta) -> float:
    return float(np.sum(theta[0] * x**2 / 2 - theta[1] * x**3 / 6))


def _kdv_toy(seed: int) -> Problem:
    d = 16
    grid = np.arange(d) * 2 * np.pi / d
    f = analytic_dynamics("gradient_flow", {"G": kdv_toy_matrix(d)})
    x0 = 0.5 + 0.5 * np.cos(grid)
    theta = np.array([1.0, 1.0])
    return Problem("gradient_flow_kdv_toy", f, x0, theta, (0.0, 1.0), LossSpec.squared_error(np.zeros(d), 0.5),
                   None, np.array([1.0, 0.8]), seed)


_BUILDERS = {
    "decay": _decay,
    "rotation": _rotation,
    "linear_nd": _linear_nd,
    "mlp_node": _mlp_node,
    "gradient_flow_kdv_toy": _kdv_toy,
}
PROBLEM_NAMES = tuple(_BUILDERS)


def builtin_problem(name: str, seed: int = 0) -> Problem:
    if name not in _BUILDERS:
        raise UnknownProblem(name)
    return _BUILDERS[name](seed)


def default_tableau(problem: Problem | None = None) -> ButcherTableau:
    return builtin_tableau("dopri5")


def default_controller(problem: Problem | None = None) -> StepController:
    return StepController.adaptive(atol=1e-8, rtol=1e-6)
