"""Explicit Runge-Kutta integration with checkpoint recording.

``integrate`` keeps one copy of every accepted state ``x_n`` together with
``(t_n, h_n)`` and throws the stage data away; that record is all the
checkpointing gradient engines need to replay any step bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import DynamicsFunction, Var, jacobian_x
from .tableau import ButcherTableau

__all__ = [
    "NonFiniteDynamics",
    "StepController",
    "StepLimitExceeded",
    "StepRecord",
    "StepResult",
    "StepSizeUnderflow",
    "Trajectory",
    "error_norm",
    "integrate",
    "integrate_variational",
    "rk_step",
]


class NonFiniteDynamics(FloatingPointError):
    def __init__(self, stage: int, t: float):
        super().__init__(f"dynamics returned a non-finite value at stage {stage + 1} (t={t!r})")
        self.stage = stage
        self.t = t


class StepSizeUnderflow(RuntimeError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow at t={t!r} (h={h!r})")
        self.t = t
        self.h = h


class StepLimitExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class StepRecord:
    t: float
    h: float
    x: np.ndarray


@dataclass
class Trajectory:
    records: list[StepRecord]
    x_final: np.ndarray
    t_final: float
    nfe: int = 0
    rejected: int = 0

    @property
    def N(self) -> int:
        return len(self.records)

    @property
    def steps(self) -> list[float]:
        return [r.h for r in self.records]


@dataclass
class StepController:
    """Fixed or adaptive step selection.

    In fixed mode ``h_init`` is the step; the final step is shortened to land on
    the end point. In adaptive mode ``h_init`` defaults to a hundredth of the span.
    """

    mode: str = "adaptive"
    atol: float = 1e-8
    rtol: float = 1e-6
    h_init: float | None = None
    safety: float = 0.9
    shrink_limit: float = 0.2
    grow_limit: float = 10.0
    max_steps: int = 200_000

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.mode == "adaptive" and (self.atol <= 0 or self.rtol <= 0):
            raise ValueError("atol and rtol must be positive in adaptive mode")
        if self.mode == "fixed" and not self.h_init:
            raise ValueError("fixed mode needs a nonzero h_init")

    @classmethod
    def fixed(cls, h: float) -> "StepController":
        return cls(mode="fixed", h_init=h)

    @classmethod
    def adaptive(cls, atol: float = 1e-8, rtol: float = 1e-6, **kw) -> "StepController":
        return cls(mode="adaptive", atol=atol, rtol=rtol, **kw)


@dataclass
class StepResult:
    x_next: np.ndarray
    stages: list[tuple[np.ndarray, np.ndarray]]
    err: np.ndarray | None = None
    nfe: int = 0
    k_last: object = field(default=None, repr=False)


def _value(v):
    return v.value if isinstance(v, Var) else v


def _combine(x, h, coeffs, ks):
    """``x + h * sum_j coeffs[j] * ks[j]`` in a fixed order, skipping zero coefficients.

    Works on arrays and tape variables alike; both paths perform the same
    floating-point operations so recorded and plain runs agree bitwise.
    """
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = float(c) * k
        acc = term if acc is None else acc + term
    if acc is None:
        return x
    return x + float(h) * acc


def _stages(evaluate, t, h, x, tab: ButcherTableau, n_stages: int, k1=None):
    Xs, ks = [], []
    nfe = 0
    for i in range(n_stages):
        X = _combine(x, h, tab.a[i, :i], ks)
        if i == 0 and k1 is not None:
            k = k1
        else:
            k = evaluate(X, t + tab.c[i] * h)
            nfe += 1
            if not np.all(np.isfinite(_value(k))):
                raise NonFiniteDynamics(i, t + tab.c[i] * h)
        Xs.append(X)
        ks.append(k)
    return Xs, ks, nfe


def _step(evaluate, t, h, x, tab: ButcherTableau, k1=None, n_stages=None, with_error=True) -> StepResult:
    s = tab.stages if n_stages is None else n_stages
    if with_error and tab.fsal and s < tab.stages:
        s = tab.stages
    Xs, ks, nfe = _stages(evaluate, t, h, x, tab, s, k1)
    x_next = _combine(x, h, tab.b[:s], ks)
    err = None
    if with_error and tab.b_err is not None:
        diff = tab.b - tab.b_err
        acc = np.zeros_like(_value(x))
        for w, k in zip(diff, ks):
            if w != 0.0:
                acc = acc + w * _value(k)
        err = h * acc
    return StepResult(x_next, list(zip(Xs, ks)), err, nfe, ks[-1])


def rk_step(f: DynamicsFunction, t_n: float, h_n: float, x_n, tab: ButcherTableau, theta=None) -> StepResult:
    """Advance one explicit Runge-Kutta step from ``x_n``.

    Evaluates every stage of the tableau in order and returns the new state, the
    list of ``(X_i, k_i)`` pairs and the embedded error estimate (``None`` for
    tableaus without embedded weights).
    """
    if h_n == 0:
        raise ValueError("step size must be nonzero")
    theta = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)
    x_n = np.asarray(x_n, dtype=float)
    if not np.all(np.isfinite(x_n)):
        raise ValueError("x_n must be finite")
    return _step(lambda X, t: f.eval(X, t, theta), t_n, h_n, x_n, tab)


def error_norm(err, x_old, x_new, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(x_old), np.abs(x_new))
    with np.errstate(over="ignore"):  # an infinite norm just rejects the step
        return float(np.sqrt(np.mean((err / scale) ** 2)))


def _run(
    evaluate: Callable,
    x0,
    t0: float,
    t1: float,
    tab: ButcherTableau,
    ctrl: StepController,
    *,
    grid: Sequence[float] | None = None,
    tape=None,
) -> Trajectory:
    """Shared stepping loop. ``x0`` may be a tape variable when ``tape`` is given."""
    span = t1 - t0
    if span == 0:
        raise ValueError("t1 must differ from t0")
    direction = 1.0 if span > 0 else -1.0
    records: list[StepRecord] = []
    x = x0
    t = float(t0)
    nfe = 0
    rejected = 0
    k1 = None

    if grid is not None:
        for h in grid:
            res = _step(evaluate, t, h, x, tab, k1=k1 if tab.fsal else None, with_error=tab.fsal)
            nfe += res.nfe
            records.append(StepRecord(t, float(h), np.array(_value(x), dtype=float)))
            x = res.x_next
            k1 = res.k_last
            t = t + h
        return Trajectory(records, x, t1 if grid else t0, nfe, 0)

    adaptive = ctrl.mode == "adaptive" and tab.adaptive
    if ctrl.h_init is not None:
        h = direction * abs(ctrl.h_init)
    else:
        h = span / 100.0
    h_min = 1e-14 * abs(span)
    p_hat = tab.error_order or (tab.order - 1)
    while direction * (t1 - t) > 0:
        if len(records) >= ctrl.max_steps:
            raise StepLimitExceeded(f"more than {ctrl.max_steps} steps")
        last = direction * (t1 - (t + h)) <= 1e-10 * abs(h)
        h_try = t1 - t if last else h
        if abs(h_try) < h_min and not last:
            raise StepSizeUnderflow(t, h_try)
        mark = tape.mark() if tape is not None else None
        res = _step(evaluate, t, h_try, x, tab, k1=k1 if tab.fsal else None, with_error=adaptive or tab.fsal)
        nfe += res.nfe
        if adaptive:
            norm = error_norm(res.err, _value(x), _value(res.x_next), ctrl.atol, ctrl.rtol)
            if norm <= 1.0:
                factor = ctrl.grow_limit if norm == 0.0 else ctrl.safety * norm ** (-1.0 / (p_hat + 1))
            else:
                factor = ctrl.safety * norm ** (-1.0 / (p_hat + 1))
            factor = min(ctrl.grow_limit, max(ctrl.shrink_limit, factor))
            if norm > 1.0:
                rejected += 1
                if tape is not None:
                    tape.truncate(mark)
                h = h_try * factor
                if abs(h) < h_min:
                    raise StepSizeUnderflow(t, h)
                continue
        records.append(StepRecord(t, float(h_try), np.array(_value(x), dtype=float)))
        x = res.x_next
        k1 = res.k_last
        t = t1 if last else t + h_try
        if adaptive and not last:
            h = h_try * factor
    return Trajectory(records, x, t, nfe, rejected)


def integrate(
    f: DynamicsFunction,
    x0,
    t0: float,
    t1: float,
    tab: ButcherTableau,
    ctrl: StepController,
    theta=None,
    *,
    grid: Sequence[float] | None = None,
) -> Trajectory:
    """Solve ``dx/dt = f(x, t, theta)`` from ``t0`` to ``t1`` and keep each ``x_n``.

    With ``grid`` the given step sizes are replayed exactly and ``ctrl`` is ignored.
    """
    theta = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)
    x0 = np.array(x0, dtype=float)
    return _run(lambda X, t: f.eval(X, t, theta), x0, t0, t1, tab, ctrl, grid=grid)


def integrate_variational(
    f: DynamicsFunction,
    x0,
    t0: float,
    t1: float,
    tab: ButcherTableau,
    traj: Trajectory,
    theta=None,
    *,
    return_history: bool = False,
):
    """Co-integrate ``delta = dx_n/dx_0`` with the same method on the grid of ``traj``.

    The variational equation is discretized by the same Runge-Kutta method as the
    state, so ``delta_N`` is the exact Jacobian of the discrete flow. Intended as a
    test oracle; it builds dense Jacobians at every stage.
    """
    theta = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)
    x = np.array(x0, dtype=float)
    d = x.size
    delta = np.eye(d)
    history = [delta.copy()]
    records = []
    nfe = 0
    t = float(t0)
    s = tab.effective_stages
    for rec in traj.records:
        h = rec.h
        ks, ds = [], []
        for i in range(s):
            X = _combine(x, h, tab.a[i, :i], ks)
            D = delta + h * sum((tab.a[i, j] * ds[j] for j in range(i) if tab.a[i, j] != 0.0), np.zeros((d, d)))
            ti = t + tab.c[i] * h
            k = f.eval(X, ti, theta)
            nfe += 1
            ks.append(k)
            ds.append(jacobian_x(f, X, ti, theta) @ D)
        records.append(StepRecord(t, h, x.copy()))
        x = _combine(x, h, tab.b[:s], ks)
        delta = delta + h * sum((tab.b[i] * ds[i] for i in range(s) if tab.b[i] != 0.0), np.zeros((d, d)))
        history.append(delta.copy())
        t = t + h
    out = Trajectory(records, x, t1 if records else t0, nfe, 0)
    if return_history:
        return out, delta, history
    return out, delta
