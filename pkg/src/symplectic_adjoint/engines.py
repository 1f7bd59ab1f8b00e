"""Gradient engines for ``L(x(T))`` with respect to ``x0`` and ``theta``.

Five strategies share one solver:

``backprop_full``
    one tape over the whole integration, swept once.
``baseline``
    keep only ``x0``; integrate again while recording, then sweep.
``step_checkpoint``
    keep every ``x_n``; per step, replay with a tape and sweep it.
``adjoint``
    keep ``x(T)``; integrate state and adjoint backward in time (approximate).
``symplectic``
    keep every ``x_n``; per step, replay stage states without tapes, then run
    the partner adjoint integrator stage by stage with one single-evaluation
    tape at a time. Exact up to rounding.

All engines count retained scalars (checkpoints plus live tape values) through
a :class:`MemoryMeter` and return a :class:`GradientResult`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .accounting import AccountingReport, MemoryMeter
from .autodiff import DynamicsFunction, Tape, vjp_on_tape
from .solver import NonFiniteDynamics, StepController, StepSizeUnderflow, _run, _stages, _step
from .tableau import ButcherTableau, derive_adjoint_coefficients

__all__ = [
    "ENGINES",
    "GradientResult",
    "LossSpec",
    "RunningCostDynamics",
    "TrainResult",
    "TrainingDiverged",
    "UnknownEngine",
    "augment_running_cost",
    "compute_gradient",
    "grad_adjoint_continuous",
    "grad_backprop_full",
    "grad_baseline_checkpoint",
    "grad_step_checkpoint",
    "grad_symplectic_adjoint",
    "grad_with_running_cost",
    "train_toy",
]


class UnknownEngine(KeyError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class LossSpec:
    """Terminal loss ``L(x_N)`` and optional running cost ``integral of l(x, t) dt``."""

    terminal: Callable[[np.ndarray], float]
    terminal_grad: Callable[[np.ndarray], np.ndarray]
    running: Callable[[np.ndarray, float], float] | None = None
    running_grad: Callable[[np.ndarray, float], np.ndarray] | None = None

    @classmethod
    def total(cls) -> "LossSpec":
        """``sum(x_N)``."""
        return cls(lambda x: float(np.sum(x)), lambda x: np.ones_like(x))

    @classmethod
    def linear(cls, c) -> "LossSpec":
        c = np.asarray(c, dtype=float)
        return cls(lambda x: float(c @ x), lambda x: c.copy())

    @classmethod
    def squared_error(cls, target, scale: float = 1.0) -> "LossSpec":
        """``scale * |x_N - target|^2``."""
        target = np.asarray(target, dtype=float)
        return cls(
            lambda x: float(scale * np.sum((x - target) ** 2)),
            lambda x: 2.0 * scale * (x - target),
        )

    @classmethod
    def constant(cls, value: float = 1.0) -> "LossSpec":
        return cls(lambda x: float(value), lambda x: np.zeros_like(x))

    def with_running(self, running, running_grad) -> "LossSpec":
        return LossSpec(self.terminal, self.terminal_grad, running, running_grad)


@dataclass
class GradientResult:
    loss: float
    grad_x0: np.ndarray
    grad_theta: np.ndarray
    accounting: AccountingReport
    x_final: np.ndarray | None = None
    steps: list[float] = field(default_factory=list)
    adjoint_path: list[np.ndarray] | None = None


def _as_inputs(f: DynamicsFunction, x0, theta):
    x0 = np.array(x0, dtype=float)
    theta = np.zeros(0) if theta is None else np.array(theta, dtype=float)
    f.check_shapes(x0, theta)
    return x0, theta


def _tape_size_per_eval(f, x, t, theta) -> int:
    tape = Tape()
    out = f.record(tape, tape.leaf(x), t, tape.leaf(theta))
    size = tape.live_scalar_count
    del out
    tape.discard()
    return size


def _plain(f, theta):
    return lambda X, t: f.eval(X, t, theta)


def _recorded_pass(f, x0, theta, t0, t1, tab, ctrl, meter, grid=None):
    tape = Tape(meter)
    xv = tape.leaf(x0)
    tv = tape.leaf(theta)
    traj = _run(lambda X, t: f.record(tape, X, t, tv), xv, t0, t1, tab, ctrl, grid=grid, tape=tape)
    return tape, xv, tv, traj


def _finish(report: AccountingReport, meter: MemoryMeter, start: int, **counts) -> AccountingReport:
    for k, v in counts.items():
        setattr(report, k, v)
    report.peak_retained_scalars = meter.peak
    report.wall_time_ns = time.perf_counter_ns() - start
    return report


def grad_backprop_full(f, x0, theta, t0, t1, tab: ButcherTableau, ctrl: StepController, loss: LossSpec,
                       *, grid=None) -> GradientResult:
    """Record the entire solve on one tape and sweep it once."""
    start = time.perf_counter_ns()
    x0, theta = _as_inputs(f, x0, theta)
    meter = MemoryMeter()
    tape, xv, tv, traj = _recorded_pass(f, x0, theta, t0, t1, tab, ctrl, meter, grid)
    xN = traj.x_final
    value = loss.terminal(xN.value)
    gx, gth = tape.backward(xN, loss.terminal_grad(xN.value), (xv, tv))
    report = _finish(
        AccountingReport(), meter, start,
        nfe_forward=traj.nfe, vjp_count=traj.N * tab.effective_stages,
        steps_accepted=traj.N, steps_rejected=traj.rejected,
        evals_per_step=tab.evals_per_step,
        tape_scalars_per_eval=_tape_size_per_eval(f, x0, t0, theta),
    )
    return GradientResult(value, gx, gth, report, np.array(xN.value), traj.steps)


def grad_baseline_checkpoint(f, x0, theta, t0, t1, tab, ctrl, loss, *, grid=None) -> GradientResult:
    """Keep only ``x0`` from a plain forward solve, then redo it on a tape."""
    start = time.perf_counter_ns()
    x0, theta = _as_inputs(f, x0, theta)
    meter = MemoryMeter()
    meter.retain(x0.size)
    first = _run(_plain(f, theta), x0, t0, t1, tab, ctrl, grid=grid)
    tape, xv, tv, traj = _recorded_pass(f, x0, theta, t0, t1, tab, ctrl, meter, grid)
    xN = traj.x_final
    value = loss.terminal(xN.value)
    gx, gth = tape.backward(xN, loss.terminal_grad(xN.value), (xv, tv))
    meter.release(x0.size)
    report = _finish(
        AccountingReport(), meter, start,
        nfe_forward=first.nfe, nfe_backward=traj.nfe, recompute_nfe=traj.nfe,
        vjp_count=traj.N * tab.effective_stages,
        steps_accepted=first.N, steps_rejected=first.rejected, steps_backward=traj.N,
        evals_per_step=tab.evals_per_step,
        tape_scalars_per_eval=_tape_size_per_eval(f, x0, t0, theta),
    )
    return GradientResult(value, gx, gth, report, np.array(xN.value), traj.steps)


def _forward_checkpoints(f, x0, theta, t0, t1, tab, ctrl, meter, grid):
    traj = _run(_plain(f, theta), x0, t0, t1, tab, ctrl, grid=grid)
    for _ in traj.records:
        meter.retain(x0.size)
    return traj


def grad_step_checkpoint(f, x0, theta, t0, t1, tab, ctrl, loss, *, grid=None) -> GradientResult:
    """Keep every accepted ``x_n``; backpropagate through one replayed step at a time.

    The backward pass reuses the accepted step sizes; no step is re-adapted.
    """
    start = time.perf_counter_ns()
    x0, theta = _as_inputs(f, x0, theta)
    d = x0.size
    meter = MemoryMeter()
    traj = _forward_checkpoints(f, x0, theta, t0, t1, tab, ctrl, meter, grid)
    value = loss.terminal(traj.x_final)
    lam = np.asarray(loss.terminal_grad(traj.x_final), dtype=float)
    g_theta = np.zeros_like(theta)
    s = tab.effective_stages
    nfe_b = 0
    for rec in reversed(traj.records):
        tape = Tape(meter)
        xv = tape.leaf(rec.x)
        tv = tape.leaf(theta)
        res = _step(lambda X, t: f.record(tape, X, t, tv), rec.t, rec.h, xv, tab, n_stages=s, with_error=False)
        nfe_b += res.nfe
        lam, g_step = tape.backward(res.x_next, lam, (xv, tv))
        g_theta = g_theta + g_step
        meter.release(d)
    report = _finish(
        AccountingReport(), meter, start,
        nfe_forward=traj.nfe, nfe_backward=nfe_b, recompute_nfe=nfe_b, vjp_count=traj.N * s,
        steps_accepted=traj.N, steps_rejected=traj.rejected, steps_backward=traj.N,
        evals_per_step=tab.evals_per_step,
        tape_scalars_per_eval=_tape_size_per_eval(f, x0, t0, theta),
    )
    return GradientResult(value, lam, g_theta, report, traj.x_final, traj.steps)


class _AdjointSystem(DynamicsFunction):
    """Augmented backward system ``(x, lambda, lambda_theta)`` for the continuous adjoint."""

    name = "adjoint_system"

    def __init__(self, f: DynamicsFunction, theta, meter: MemoryMeter):
        self.f = f
        self.theta = theta
        self.meter = meter
        self.d = 2 * f.d + f.m
        self.m = 0
        self.evals = 0
        self.tape_peak = 0

    def eval(self, z, t, _theta):
        d = self.f.d
        fx, gx, gth, size = vjp_on_tape(self.f, z[:d], t, self.theta, z[d:2 * d], self.meter)
        self.evals += 1
        self.tape_peak = max(self.tape_peak, size)
        return np.concatenate([fx, -gx, -gth])


def grad_adjoint_continuous(f, x0, theta, t0, t1, tab, ctrl, loss, *, ctrl_bwd: StepController | None = None,
                            grid=None) -> GradientResult:
    """Continuous adjoint: keep ``x(T)`` and integrate state and adjoints back to ``t0``.

    The backward solve adapts its own steps under ``ctrl_bwd`` (default: ``ctrl``)
    with a single error norm over the whole augmented vector. The result carries
    discretization error and is not the exact gradient of the forward solve.
    """
    start = time.perf_counter_ns()
    x0, theta = _as_inputs(f, x0, theta)
    d = x0.size
    meter = MemoryMeter()
    traj = _run(_plain(f, theta), x0, t0, t1, tab, ctrl, grid=grid)
    meter.retain(d)
    value = loss.terminal(traj.x_final)
    lam = np.asarray(loss.terminal_grad(traj.x_final), dtype=float)
    system = _AdjointSystem(f, theta, meter)
    z1 = np.concatenate([traj.x_final, lam, np.zeros_like(theta)])
    ctrl_bwd = ctrl if ctrl_bwd is None else ctrl_bwd
    bwd_grid = [-h for h in reversed(grid)] if grid is not None else None
    back = _run(lambda z, t: system.eval(z, t, None), z1, t1, t0, tab, ctrl_bwd, grid=bwd_grid)
    z0 = back.x_final
    meter.release(d)
    report = _finish(
        AccountingReport(), meter, start,
        nfe_forward=traj.nfe, nfe_backward=back.nfe, vjp_count=system.evals,
        steps_accepted=traj.N, steps_rejected=traj.rejected + back.rejected, steps_backward=back.N,
        evals_per_step=tab.evals_per_step, tape_scalars_per_eval=system.tape_peak,
    )
    return GradientResult(value, z0[d:2 * d].copy(), z0[2 * d:].copy(), report, traj.x_final, traj.steps)


def _accumulate(total, contribution, dtype):
    if dtype is None:
        return total + contribution
    return (total.astype(dtype) + np.asarray(contribution).astype(dtype)).astype(dtype)


def grad_symplectic_adjoint(
    f, x0, theta, t0, t1, tab, ctrl, loss, *,
    grid=None,
    accumulation: str = "two_level",
    accum_dtype=None,
    record_path: bool = False,
    trace: list | None = None,
) -> GradientResult:
    """Exact gradient with checkpoints ``{x_n}`` plus one step's stage states.

    Forward: plain solve keeping each accepted ``x_n``. Backward, for each step
    from last to first: replay the stage states ``X_i`` from ``x_n`` without
    recording, then for ``i = s .. 1`` form the stage adjoint from ``lambda_{n+1}``
    and the later ``l_j``, record a tape for the single evaluation at ``X_i``,
    sweep it, and drop both the tape and ``X_i``. Parameter-gradient contributions
    are streamed into a step-local sum that is added to the total once per step
    (``accumulation="flat"`` adds each stage contribution to the total directly).
    ``accum_dtype`` simulates lower-precision accumulation of the parameter
    gradient. ``trace`` collects ``(n, i, j)`` for every ``l_j`` read while forming
    stage ``i``'s adjoint.
    """
    if accumulation not in ("two_level", "flat"):
        raise ValueError(f"unknown accumulation mode {accumulation!r}")
    start = time.perf_counter_ns()
    x0, theta = _as_inputs(f, x0, theta)
    d = x0.size
    meter = MemoryMeter()
    traj = _forward_checkpoints(f, x0, theta, t0, t1, tab, ctrl, meter, grid)
    coeffs = derive_adjoint_coefficients(tab)
    s = coeffs.stages
    zero_set = coeffs.zero_set
    coupling = coeffs.coupling
    deps = [coeffs.dependencies(i) for i in range(s)]

    value = loss.terminal(traj.x_final)
    lam = np.asarray(loss.terminal_grad(traj.x_final), dtype=float)
    path = [lam.copy()] if record_path else None
    dtype = None if accum_dtype is None else np.dtype(accum_dtype)
    g_theta = np.zeros_like(theta) if dtype is None else np.zeros(theta.size, dtype=dtype)
    plain = _plain(f, theta)
    nfe_b = 0
    vjps = 0
    tape_peak = 0

    for n in range(traj.N - 1, -1, -1):
        rec = traj.records[n]
        h, t = rec.h, rec.t
        Xs, _, nfe = _stages(plain, t, h, rec.x, tab, s)
        nfe_b += nfe
        meter.retain(s * d)
        tb = coeffs.tilde_b(h)
        ls: list = [None] * s
        g_step = np.zeros_like(g_theta)
        for i in range(s - 1, -1, -1):
            acc = None
            for j in deps[i]:
                if trace is not None:
                    trace.append((n, i, j))
                term = (tb[j] * coupling[i, j]) * ls[j]
                acc = term if acc is None else acc + term
            if i in zero_set:
                Lam = -acc if acc is not None else np.zeros(d)
            else:
                Lam = lam - h * acc if acc is not None else lam
            _, gx, gth, size = vjp_on_tape(f, Xs[i], t + tab.c[i] * h, theta, Lam, meter)
            nfe_b += 1
            vjps += 1
            tape_peak = max(tape_peak, size)
            ls[i] = -gx
            contribution = (h * tb[i]) * gth
            if accumulation == "two_level":
                g_step = _accumulate(g_step, contribution, dtype)
            else:
                g_theta = _accumulate(g_theta, contribution, dtype)
            meter.release(d)
        upd = None
        for i in range(s):
            term = tb[i] * ls[i]
            upd = term if upd is None else upd + term
        lam = lam - h * upd
        if accumulation == "two_level":
            g_theta = _accumulate(g_theta, g_step, dtype)
        meter.release(d)
        if record_path:
            path.append(lam.copy())

    if record_path:
        path.reverse()
    report = _finish(
        AccountingReport(), meter, start,
        nfe_forward=traj.nfe, nfe_backward=nfe_b, recompute_nfe=traj.N * s, vjp_count=vjps,
        steps_accepted=traj.N, steps_rejected=traj.rejected, steps_backward=traj.N,
        evals_per_step=tab.evals_per_step,
        tape_scalars_per_eval=tape_peak or _tape_size_per_eval(f, x0, t0, theta),
    )
    return GradientResult(value, lam, np.asarray(g_theta, dtype=float), report, traj.x_final, traj.steps, path)


# running cost ----------------------------------------------------------------


class _RunningTerm(DynamicsFunction):
    name = "running_cost"

    def __init__(self, loss: LossSpec, d: int, m: int):
        self.loss = loss
        self.d = d
        self.m = m

    def eval(self, x, t, theta):
        return np.array([float(self.loss.running(x, t))])

    def vjp(self, x, t, theta, lam):
        return lam[0] * np.asarray(self.loss.running_grad(x, t), dtype=float), np.zeros(self.m)


class RunningCostDynamics(DynamicsFunction):
    """``f`` extended with a quadrature coordinate ``c' = l(x, t)``."""

    def __init__(self, f: DynamicsFunction, loss: LossSpec):
        if loss.running is None or loss.running_grad is None:
            raise ValueError("loss has no running cost")
        self.f = f
        self.d = f.d + 1
        self.m = f.m
        self.name = f"{f.name}+running"
        self._term = _RunningTerm(loss, f.d, f.m)

    def eval(self, z, t, theta):
        x = z[: self.f.d]
        return np.concatenate([self.f.eval(x, t, theta), self._term.eval(x, t, theta)])

    def vjp(self, z, t, theta, lam):
        x = z[: self.f.d]
        gx, gth = self.f.vjp(x, t, theta, lam[: self.f.d])
        gx_run, _ = self._term.vjp(x, t, theta, lam[self.f.d:])
        return np.concatenate([gx + gx_run, [0.0]]), gth

    def record(self, tape, z, t, theta):
        x = tape.slice(z, 0, self.f.d, (self.f.d,))
        fx = self.f.record(tape, x, t, theta)
        run = tape.opaque(self._term, x, t, theta)
        return tape.concat(fx, run)


def augment_running_cost(f: DynamicsFunction, x0, loss: LossSpec):
    """Return ``(f_aug, z0, loss_aug)`` with the running cost folded into the state."""
    d = f.d
    f_aug = RunningCostDynamics(f, loss)
    z0 = np.concatenate([np.asarray(x0, dtype=float), [0.0]])

    def terminal(z):
        return float(loss.terminal(z[:d]) + z[d])

    def terminal_grad(z):
        return np.concatenate([np.asarray(loss.terminal_grad(z[:d]), dtype=float), [1.0]])

    return f_aug, z0, LossSpec(terminal, terminal_grad)


def grad_with_running_cost(f, x0, theta, t0, t1, tab, ctrl, loss: LossSpec, *,
                           engine: str = "symplectic", **kw) -> GradientResult:
    """Gradient of ``L(x_N) + integral of l(x, t) dt`` via the quadrature-augmented system.

    With no running term this is the plain engine call.
    """
    fn = _engine(engine)
    if loss.running is None:
        return fn(f, x0, theta, t0, t1, tab, ctrl, loss, **kw)
    f_aug, z0, loss_aug = augment_running_cost(f, x0, loss)
    res = fn(f_aug, z0, theta, t0, t1, tab, ctrl, loss_aug, **kw)
    res.grad_x0 = res.grad_x0[: f.d].copy()
    if res.x_final is not None:
        res.x_final = res.x_final[: f.d].copy()
    return res


# registry and training -------------------------------------------------------

ENGINES: dict[str, Callable[..., GradientResult]] = {
    "backprop_full": grad_backprop_full,
    "baseline": grad_baseline_checkpoint,
    "step_checkpoint": grad_step_checkpoint,
    "adjoint": grad_adjoint_continuous,
    "symplectic": grad_symplectic_adjoint,
}


def _engine(name: str):
    try:
        return ENGINES[name]
    except KeyError:
        raise UnknownEngine(name) from None


def compute_gradient(engine: str, f, x0, theta, t0, t1, tab, ctrl, loss, **kw) -> GradientResult:
    """Dispatch by engine name; a running cost in ``loss`` is handled by augmentation."""
    if loss.running is not None:
        return grad_with_running_cost(f, x0, theta, t0, t1, tab, ctrl, loss, engine=engine, **kw)
    return _engine(engine)(f, x0, theta, t0, t1, tab, ctrl, loss, **kw)


@dataclass
class TrainResult:
    losses: list[float]
    theta: np.ndarray
    reports: list[AccountingReport]


def train_toy(problem, engine: str, epochs: int, lr: float, *, tab: ButcherTableau | None = None,
              ctrl: StepController | None = None, theta_target=None) -> TrainResult:
    """Fit ``theta`` by plain gradient descent so that ``x(T)`` matches data from ``theta_target``.

    The data point is produced by the same solver at ``theta_target`` (default:
    the problem's own target). The loss is ``0.5 * |x(T) - y|^2``.
    """
    from .problems import default_controller, default_tableau
    from .solver import integrate

    _engine(engine)
    tab = tab or default_tableau(problem)
    ctrl = ctrl or default_controller(problem)
    target = problem.theta_target if theta_target is None else np.asarray(theta_target, dtype=float)
    t0, t1 = problem.t_span
    y = integrate(problem.dynamics, problem.x0, t0, t1, tab, ctrl, target).x_final
    loss = LossSpec.squared_error(y, scale=0.5)
    theta = np.array(problem.theta0, dtype=float)
    losses, reports = [], []
    for epoch in range(epochs):
        try:
            res = compute_gradient(engine, problem.dynamics, problem.x0, theta, t0, t1, tab, ctrl, loss)
        except (NonFiniteDynamics, StepSizeUnderflow, FloatingPointError) as exc:
            raise TrainingDiverged(epoch, float("nan")) from exc
        if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad_theta)):
            raise TrainingDiverged(epoch, res.loss)
        losses.append(res.loss)
        reports.append(res.accounting)
        theta = theta - lr * res.grad_theta
    return TrainResult(losses, theta, reports)
