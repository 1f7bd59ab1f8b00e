"""Command-line benchmark harness.

Commands:

``grad``             one gradient, printed as JSON
``sweep-tolerance``  engines x absolute tolerances, CSV or JSON table
``sweep-tableau``    engines x tableaus, CSV or JSON table
``train``            gradient-descent fit; loss curve as CSV, parameters as a binary file

Gradient errors are measured against ``backprop_full`` run with the same
problem, tableau and controller, which is exact for that discretization.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .autodiff import MlpDynamics, UnknownProblem, save_parameters
from .engines import ENGINES, TrainingDiverged, UnknownEngine, compute_gradient, train_toy
from .problems import builtin_problem
from .solver import NonFiniteDynamics, StepController, StepLimitExceeded, StepSizeUnderflow
from .tableau import TABLEAU_NAMES, UnknownMethod, builtin_tableau

CSV_COLUMNS = ["engine", "tableau", "atol", "rtol", "N", "nfe_fwd", "nfe_bwd", "vjp_count",
               "peak_scalars", "grad_err", "wall_ns", "status"]
DEFAULT_ATOLS = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
USAGE_ERRORS = (UnknownEngine, UnknownProblem, UnknownMethod)
SOLVER_ERRORS = (StepSizeUnderflow, NonFiniteDynamics, StepLimitExceeded)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _rel_inf(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = float(np.max(np.abs(b)))
    diff = float(np.max(np.abs(a - b)))
    return diff / scale if scale > 0 else diff


def _check_engine(name: str) -> str:
    if name not in ENGINES:
        raise UnknownEngine(name)
    return name


def _controller(atol: float, rtol: float | None, fixed_h: float | None) -> StepController:
    if fixed_h is not None:
        return StepController.fixed(fixed_h)
    if rtol is None:
        rtol = float(f"{100.0 * atol:.12g}")  # 1e-5, not 9.999999999999999e-06
    return StepController.adaptive(atol, rtol)


def _span(problem, args):
    t0, t1 = problem.t_span
    return (t0 if args.t0 is None else args.t0), (t1 if args.t1 is None else args.t1)


def _run_cell(problem, engine: str, tab_name: str, atol: float, rtol: float | None, fixed_h, span) -> dict:
    """One engine invocation plus its same-settings oracle; solver failures become flagged rows."""
    tab = builtin_tableau(tab_name)
    ctrl = _controller(atol, rtol, fixed_h)
    row = {"engine": engine, "tableau": tab_name, "atol": atol,
           "rtol": ctrl.rtol if fixed_h is None else None}
    f, x0, th = problem.dynamics, problem.x0, problem.theta0
    try:
        res = compute_gradient(engine, f, x0, th, *span, tab, ctrl, problem.loss)
        ref = res if engine == "backprop_full" else compute_gradient(
            "backprop_full", f, x0, th, *span, tab, ctrl, problem.loss)
    except SOLVER_ERRORS as exc:
        row.update({k: None for k in CSV_COLUMNS[4:11]})
        row["status"] = type(exc).__name__
        return row
    acc = res.accounting
    err = max(_rel_inf(res.grad_theta, ref.grad_theta), _rel_inf(res.grad_x0, ref.grad_x0))
    row.update({
        "N": acc.steps_accepted, "nfe_fwd": acc.nfe_forward, "nfe_bwd": acc.nfe_backward,
        "vjp_count": acc.vjp_count, "peak_scalars": acc.peak_retained_scalars, "grad_err": err,
        "wall_ns": acc.wall_time_ns, "status": "ok",
    })
    return row


def _cells(problem, cells, args) -> list[dict]:
    span = _span(problem, args)
    work = [lambda c=c: _run_cell(problem, *c, span) for c in cells]
    if args.jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            return list(pool.map(lambda w: w(), work))
    return [w() for w in work]


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _emit_table(rows: list[dict], args, out) -> None:
    if args.format == "json":
        json.dump(rows, out, sort_keys=True, indent=2)
        out.write("\n")
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])


def _write(args, text_fn) -> None:
    if args.out:
        with open(args.out, "w", newline="") as fh:
            text_fn(fh)
    else:
        text_fn(sys.stdout)


def cmd_grad(args) -> int:
    problem = builtin_problem(args.problem, seed=args.seed)
    engine = _check_engine(args.engine)
    tab = builtin_tableau(args.tableau)
    ctrl = _controller(args.atol, args.rtol, args.fixed_h)
    span = _span(problem, args)
    f, x0, th = problem.dynamics, problem.x0, problem.theta0
    res = compute_gradient(engine, f, x0, th, *span, tab, ctrl, problem.loss)
    ref = res if engine == "backprop_full" else compute_gradient(
        "backprop_full", f, x0, th, *span, tab, ctrl, problem.loss)
    doc = {
        "problem": problem.name,
        "engine": engine,
        "tableau": tab.name,
        "controller": {"mode": ctrl.mode, "atol": ctrl.atol, "rtol": ctrl.rtol, "h": ctrl.h_init},
        "t_span": list(span),
        "loss": res.loss,
        "x_final": res.x_final.tolist(),
        "grad_x0": res.grad_x0.tolist(),
        "grad_theta": res.grad_theta.tolist(),
        "gradient_error_vs_oracle": max(_rel_inf(res.grad_theta, ref.grad_theta),
                                        _rel_inf(res.grad_x0, ref.grad_x0)),
        "accounting": res.accounting.as_dict(),
    }
    if args.format == "csv":
        acc = res.accounting
        row = {"engine": engine, "tableau": tab.name, "atol": args.atol,
               "rtol": ctrl.rtol if args.fixed_h is None else None, "N": acc.steps_accepted,
               "nfe_fwd": acc.nfe_forward, "nfe_bwd": acc.nfe_backward, "vjp_count": acc.vjp_count,
               "peak_scalars": acc.peak_retained_scalars, "grad_err": doc["gradient_error_vs_oracle"],
               "wall_ns": acc.wall_time_ns, "status": "ok"}
        _write(args, lambda fh: _emit_table([row], args, fh))
    else:
        _write(args, lambda fh: (json.dump(doc, fh, sort_keys=True, indent=2), fh.write("\n")))
    return 0


def _engines(args) -> list[str]:
    names = list(ENGINES) if args.engines is None else args.engines
    return [_check_engine(e) for e in names]


def cmd_sweep_tolerance(args) -> int:
    problem = builtin_problem(args.problem, seed=args.seed)
    engines = _engines(args)
    builtin_tableau(args.tableau)
    atols = args.atol or DEFAULT_ATOLS
    cells = [(e, args.tableau, a, args.rtol, args.fixed_h) for e in engines for a in atols]
    rows = _cells(problem, cells, args)
    _write(args, lambda fh: _emit_table(rows, args, fh))
    return 0


def cmd_sweep_tableau(args) -> int:
    problem = builtin_problem(args.problem, seed=args.seed)
    engines = _engines(args)
    tableaus = list(TABLEAU_NAMES) if args.tableaus is None else args.tableaus
    for t in tableaus:
        builtin_tableau(t)
    cells = [(e, t, args.atol, args.rtol, args.fixed_h) for t in tableaus for e in engines]
    rows = _cells(problem, cells, args)
    _write(args, lambda fh: _emit_table(rows, args, fh))
    return 0


def cmd_train(args) -> int:
    problem = builtin_problem(args.problem, seed=args.seed)
    engine = _check_engine(args.engine)
    tab = builtin_tableau(args.tableau)
    ctrl = _controller(args.atol, args.rtol, args.fixed_h)
    result = train_toy(problem, engine, args.epochs, args.lr, tab=tab, ctrl=ctrl)
    widths = problem.dynamics.widths if isinstance(problem.dynamics, MlpDynamics) else ()
    if args.out:
        with open(args.out, "wb") as fh:
            save_parameters(fh, result.theta, problem.dynamics.d, widths)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for k, loss in enumerate(result.losses):
        w.writerow([k, repr(float(loss))])
    if args.curve:
        with open(args.curve, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _common(p: argparse.ArgumentParser, sweep_atol: bool = False) -> None:
    p.add_argument("--problem", default="mlp_node")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t0", type=float)
    p.add_argument("--t1", type=float)
    if sweep_atol:
        p.add_argument("--atol", type=float, nargs="+", help="absolute tolerances (default 1e-8 ... 1e-3)")
    else:
        p.add_argument("--atol", type=float, default=1e-8)
    p.add_argument("--rtol", type=float, help="relative tolerance (default 100 x atol)")
    p.add_argument("--fixed-h", type=float, help="use fixed steps of this size instead of adaptive control")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", help="output file (default: standard output)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="symplectic-adjoint", description="Gradient engines for neural ODEs: benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grad", help="compute one gradient")
    _common(g)
    g.add_argument("--engine", default="symplectic")
    g.add_argument("--tableau", default="dopri5")
    g.set_defaults(func=cmd_grad, format="json")

    st = sub.add_parser("sweep-tolerance", help="engines x absolute tolerances")
    _common(st, sweep_atol=True)
    st.add_argument("--engines", nargs="*")
    st.add_argument("--tableau", default="dopri5")
    st.set_defaults(func=cmd_sweep_tolerance)

    sb = sub.add_parser("sweep-tableau", help="engines x tableaus")
    _common(sb)
    sb.add_argument("--engines", nargs="*")
    sb.add_argument("--tableaus", nargs="*")
    sb.set_defaults(func=cmd_sweep_tableau, atol=1e-6)

    tr = sub.add_parser("train", help="fit parameters by gradient descent")
    _common(tr)
    tr.add_argument("--engine", default="symplectic")
    tr.add_argument("--tableau", default="dopri5")
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--curve", help="loss-curve CSV path (default: standard output)")
    tr.set_defaults(func=cmd_train, problem="decay")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": message, "kind": kind}, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except USAGE_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc.args[0]) if exc.args else "", 2)
    except (TrainingDiverged, *SOLVER_ERRORS) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
