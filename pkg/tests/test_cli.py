import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from symplectic_adjoint import load_parameters
from symplectic_adjoint.cli import CSV_COLUMNS, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_grad_decay_matches_closed_form(capsys):
    code, out, _ = run(capsys, "grad", "--problem", "decay", "--engine", "symplectic", "--tableau", "dopri5")
    assert code == 0
    doc = json.loads(out)
    assert doc["engine"] == "symplectic"
    assert doc["grad_theta"][0] == pytest.approx(np.exp(-0.5), rel=1e-5)
    assert doc["gradient_error_vs_oracle"] <= 1e-12
    assert doc["accounting"]["steps_accepted"] >= 1


def test_grad_adjoint_error_exceeds_symplectic(capsys):
    _, adj, _ = run(capsys, "grad", "--problem", "mlp_node", "--engine", "adjoint", "--atol", "1e-3")
    _, sym, _ = run(capsys, "grad", "--problem", "mlp_node", "--engine", "symplectic", "--atol", "1e-3")
    assert json.loads(adj)["gradient_error_vs_oracle"] > json.loads(sym)["gradient_error_vs_oracle"]


def test_unknown_engine_exits_two(capsys):
    code, out, err = run(capsys, "grad", "--engine", "mali")
    assert code == 2 and out == ""
    assert json.loads(err)["kind"] == "UnknownEngine"


@pytest.mark.parametrize("argv, kind", [
    (["grad", "--problem", "lorenz"], "UnknownProblem"),
    (["grad", "--tableau", "rk45"], "UnknownMethod"),
    (["grad", "--atol", "abc"], "UsageError"),
    (["frobnicate"], "UsageError"),
    (["sweep-tolerance", "--engines", "symplectic", "nope"], "UnknownEngine"),
])
def test_error_paths_are_machine_readable(capsys, argv, kind):
    code, _, err = run(capsys, *argv)
    assert code != 0
    assert json.loads(err)["kind"] == kind


def test_solver_failure_in_grad_is_reported(capsys):
    code, _, err = run(capsys, "grad", "--problem", "decay", "--atol", "1e-3", "--rtol", "-1")
    assert code == 1
    assert json.loads(err)["kind"] == "ValueError"


def test_sweep_tolerance_rows(capsys):
    code, out, _ = run(capsys, "sweep-tolerance", "--problem", "mlp_node", "--engines", "adjoint", "symplectic")
    assert code == 0
    assert out.splitlines()[0] == ",".join(CSV_COLUMNS)
    table = rows(out)
    assert len(table) == 12
    sym = [r for r in table if r["engine"] == "symplectic"]
    adj = [float(r["grad_err"]) for r in table if r["engine"] == "adjoint"]
    assert all(float(r["grad_err"]) <= 1e-9 for r in sym)
    assert [float(r["rtol"]) for r in sym] == pytest.approx([100 * float(r["atol"]) for r in sym])
    increases = sum(b > a for a, b in zip(adj, adj[1:]))
    assert increases >= 4


def test_sweep_empty_engine_list_is_header_only(capsys):
    code, out, _ = run(capsys, "sweep-tolerance", "--engines")
    assert code == 0
    assert out == ",".join(CSV_COLUMNS) + "\n"


def test_sweep_flags_underflow_rows(capsys):
    # no representable step meets these tolerances
    code, out, _ = run(capsys, "sweep-tolerance", "--problem", "decay", "--engines", "symplectic", "adjoint",
                       "--atol", "1e-300", "1e-8", "--rtol", "1e-300")
    assert code == 0
    table = rows(out)
    assert [r["status"] for r in table] == ["StepSizeUnderflow", "ok"] * 2
    assert table[0]["grad_err"] == "" and table[0]["N"] == ""
    assert float(table[1]["grad_err"]) <= 1e-12


def test_sweep_tableau_memory_trend(capsys):
    code, out, _ = run(capsys, "sweep-tableau", "--problem", "mlp_node", "--engines", "step_checkpoint", "symplectic")
    assert code == 0
    table = rows(out)
    peak = {(r["tableau"], r["engine"]): int(r["peak_scalars"]) for r in table}
    ratio = {t: peak[(t, "step_checkpoint")] / peak[(t, "symplectic")] for t in ("bosh3", "dopri8")}
    assert ratio["dopri8"] > ratio["bosh3"]
    N = {r["tableau"]: int(r["N"]) for r in table}
    assert N["heun_euler"] == max(N.values())


def test_sweep_single_cell(capsys):
    _, out, _ = run(capsys, "sweep-tableau", "--engines", "symplectic", "--tableaus", "bosh3")
    assert len(rows(out)) == 1


def test_output_is_byte_stable_apart_from_wall_time(capsys):
    argv = ["sweep-tableau", "--problem", "mlp_node", "--fixed-h", "0.25", "--engines", "symplectic", "baseline"]
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv, "--jobs", "4")

    def strip(text):
        return [{k: v for k, v in r.items() if k != "wall_ns"} for r in rows(text)]

    assert strip(a) == strip(b)


def test_json_sweep_format(capsys, tmp_path):
    target = tmp_path / "sweep.json"
    code, out, _ = run(capsys, "sweep-tolerance", "--engines", "symplectic", "--atol", "1e-6",
                       "--format", "json", "--out", str(target))
    assert code == 0 and out == ""
    (row,) = json.loads(target.read_text())
    assert set(CSV_COLUMNS) <= set(row)


def test_train_decay_fit(capsys, tmp_path):
    theta_file = tmp_path / "theta.bin"
    code, out, _ = run(capsys, "train", "--problem", "decay", "--engine", "symplectic", "--epochs", "500",
                       "--lr", "0.1", "--out", str(theta_file))
    assert code == 0
    curve = rows(out)
    assert len(curve) == 500
    with open(theta_file, "rb") as fh:
        stored = load_parameters(fh)
    assert abs(stored.theta[0] + 0.7) <= 1e-3


def test_train_zero_epochs(capsys, tmp_path):
    theta_file = tmp_path / "theta.bin"
    code, out, _ = run(capsys, "train", "--problem", "decay", "--epochs", "0", "--out", str(theta_file))
    assert code == 0
    assert out == "epoch,loss\n"
    with open(theta_file, "rb") as fh:
        assert load_parameters(fh).theta.tolist() == [-0.5]


def test_train_curves_agree_across_engines(capsys, tmp_path):
    curves = {}
    for engine in ("symplectic", "backprop_full"):
        path = tmp_path / f"{engine}.csv"
        run(capsys, "train", "--engine", engine, "--epochs", "30", "--curve", str(path))
        curves[engine] = [float(r["loss"]) for r in rows(path.read_text())]
    for a, b in zip(curves["symplectic"], curves["backprop_full"]):
        assert abs(a - b) <= 1e-8 * abs(b)


def test_train_mlp_writes_widths(capsys, tmp_path):
    theta_file = tmp_path / "mlp.bin"
    code, _, _ = run(capsys, "train", "--problem", "mlp_node", "--epochs", "2", "--fixed-h", "0.25",
                     "--out", str(theta_file))
    assert code == 0
    with open(theta_file, "rb") as fh:
        assert load_parameters(fh).widths == [4, 16, 4]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_reports_kind(capsys):
    code, _, err = run(capsys, "train", "--problem", "decay", "--epochs", "200", "--lr", "1e4",
                       "--tableau", "heun_euler", "--fixed-h", "0.1")
    assert code == 1
    assert json.loads(err)["kind"] == "TrainingDiverged"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "symplectic_adjoint", "grad", "--problem", "decay"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["problem"] == "decay"
