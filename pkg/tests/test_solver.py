import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from symplectic_adjoint import (
    MlpDynamics,
    NonFiniteDynamics,
    StepController,
    StepSizeUnderflow,
    analytic_dynamics,
    builtin_tableau,
    integrate,
    integrate_variational,
    rk_step,
)
from symplectic_adjoint.autodiff import AnalyticDynamics
from symplectic_adjoint.solver import error_norm
from symplectic_adjoint.tableau import TABLEAU_NAMES

from conftest import central_diff


def scalar(fn, name="scalar"):
    return AnalyticDynamics(name, 1, 0, lambda x, t, th: fn(x, t), None)


LOGISTIC = scalar(lambda x, t: x * (1 - x), "logistic")


def logistic_exact(T, x0=0.1):
    return 1.0 / (1.0 + (1.0 / x0 - 1.0) * np.exp(-T))


def test_heun_step_hand_value():
    res = rk_step(scalar(lambda x, t: x), 0.0, 0.1, np.array([1.0]), builtin_tableau("heun_euler"))
    assert res.x_next[0] == pytest.approx(1.105, abs=1e-15)
    assert len(res.stages) == 2


@pytest.mark.parametrize("name", TABLEAU_NAMES)
def test_zero_dynamics_step(name):
    zero = AnalyticDynamics("zero", 3, 0, lambda x, t, th: np.zeros_like(x), None)
    x0 = np.array([1.0, -2.0, 3.5])
    res = rk_step(zero, 0.0, 0.37, x0, builtin_tableau(name))
    assert np.array_equal(res.x_next, x0)
    assert all(np.all(k == 0) for _, k in res.stages)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_dynamics_reports_stage():
    f = scalar(lambda x, t: np.sqrt(x - 1.2))
    with pytest.raises(NonFiniteDynamics) as err:
        rk_step(f, 0.0, 0.1, np.array([1.0]), builtin_tableau("heun_euler"))
    assert err.value.stage == 0


def test_dopri5_linear_convergence_against_matrix_exponential():
    A = np.array([[-0.3, 1.0], [-1.0, -0.2]])
    f = analytic_dynamics("linear", {"d": 2})
    x0 = np.array([1.0, 0.5])
    T = 2.0
    exact = expm(A * T) @ x0
    tab = builtin_tableau("dopri5")
    hs, errs = [], []
    for N in (8, 16, 32, 64):
        tr = integrate(f, x0, 0, T, tab, StepController.fixed(T / N), A.ravel())
        hs.append(T / N)
        errs.append(np.linalg.norm(tr.x_final - exact))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 5) <= 0.2


@pytest.mark.parametrize(
    "name, Ns",
    [
        ("heun_euler", [40, 80, 160, 320]),
        ("bosh3", [40, 80, 160, 320]),
        ("dopri5", [20, 40, 80, 160]),
        ("dopri8", [10, 14, 20, 28]),
    ],
)
def test_order_of_convergence(name, Ns):
    tab = builtin_tableau(name)
    T = 10.0
    errs = [abs(integrate(LOGISTIC, [0.1], 0, T, tab, StepController.fixed(T / N)).x_final[0] - logistic_exact(T))
            for N in Ns]
    slope = np.polyfit(np.log(T / np.array(Ns)), np.log(errs), 1)[0]
    assert tab.order - 0.3 <= slope <= tab.order + 0.5


def test_zero_dynamics_fixed_steps():
    zero = AnalyticDynamics("zero", 2, 0, lambda x, t, th: np.zeros_like(x), None)
    tr = integrate(zero, [3.0, 4.0], 0.0, 1.0, builtin_tableau("bosh3"), StepController.fixed(0.1))
    assert tr.N == 10
    assert np.array_equal(tr.x_final, [3.0, 4.0])


def test_adaptive_exponential_growth_within_tolerance():
    tr = integrate(scalar(lambda x, t: x), [1.0], 0.0, 1.0, builtin_tableau("dopri5"),
                   StepController.adaptive(1e-8, 1e-6))
    assert abs(tr.x_final[0] - np.e) <= 1e-6 * np.e + 1e-8


def test_rotation_returns_to_start_with_dopri8():
    f = analytic_dynamics("rotation")
    tr = integrate(f, [1.0, 0.0], 0.0, 2 * np.pi, builtin_tableau("dopri8"), StepController.fixed(2 * np.pi / 50), [1.0])
    assert tr.N == 50
    assert np.max(np.abs(tr.x_final - [1.0, 0.0])) <= 1e-9


def test_records_chain_and_final_time():
    tr = integrate(LOGISTIC, [0.1], 0.0, 10.0, builtin_tableau("dopri5"), StepController.adaptive(1e-9, 1e-7))
    for a, b in zip(tr.records[:-1], tr.records[1:]):
        assert b.t == pytest.approx(a.t + a.h, abs=1e-13)
    assert tr.t_final == 10.0
    assert sum(tr.steps) == pytest.approx(10.0, abs=1e-12)


def test_backward_direction_integration():
    tab = builtin_tableau("dopri5")
    fwd = integrate(LOGISTIC, [0.1], 0.0, 4.0, tab, StepController.adaptive(1e-10, 1e-10))
    back = integrate(LOGISTIC, fwd.x_final, 4.0, 0.0, tab, StepController.adaptive(1e-10, 1e-10))
    assert all(r.h < 0 for r in back.records)
    assert back.x_final[0] == pytest.approx(0.1, rel=1e-8)


def test_adaptive_steps_accept_only_within_tolerance():
    tab = builtin_tableau("bosh3")
    atol, rtol = 1e-6, 1e-4
    f = MlpDynamics([3, 8, 3])
    theta = f.init_params(3)
    tr = integrate(f, [0.5, -1.0, 0.2], 0.0, 2.0, tab, StepController.adaptive(atol, rtol), theta)
    assert tr.rejected >= 0
    for rec in tr.records:
        res = rk_step(f, rec.t, rec.h, rec.x, tab, theta)
        assert error_norm(res.err, rec.x, res.x_next, atol, rtol) <= 1.0


def test_rejected_steps_count_toward_nfe():
    tab = builtin_tableau("heun_euler")
    # a huge initial step must be rejected
    ctrl = StepController.adaptive(1e-9, 1e-9, h_init=5.0)
    tr = integrate(LOGISTIC, [0.1], 0.0, 5.0, tab, ctrl)
    assert tr.rejected > 0
    assert tr.nfe == 2 * (tr.N + tr.rejected)


def test_fsal_saves_one_evaluation_per_step():
    tab = builtin_tableau("dopri5")
    tr = integrate(LOGISTIC, [0.1], 0.0, 1.0, tab, StepController.fixed(0.1))
    assert tr.nfe == 6 * tr.N + 1


def test_step_size_underflow():
    # wildly oscillating forcing: no representable step meets the tolerance
    f = scalar(lambda x, t: 1e6 * np.sin(1e20 * t) * np.ones_like(x))
    with pytest.raises(StepSizeUnderflow):
        integrate(f, [0.0], 0.0, 1.0, builtin_tableau("heun_euler"), StepController.adaptive(1e-10, 1e-10))


def test_integrate_is_deterministic():
    f = MlpDynamics([2, 6, 2])
    theta = f.init_params(1)
    tab = builtin_tableau("dopri5")
    a = integrate(f, [1.0, 2.0], 0, 3, tab, StepController.adaptive(1e-7, 1e-5), theta)
    b = integrate(f, [1.0, 2.0], 0, 3, tab, StepController.adaptive(1e-7, 1e-5), theta)
    assert a.steps == b.steps
    assert all(np.array_equal(r.x, q.x) for r, q in zip(a.records, b.records))
    assert np.array_equal(a.x_final, b.x_final)


def test_replay_from_any_record_is_bitwise():
    f = MlpDynamics([2, 6, 2])
    theta = f.init_params(2)
    tab = builtin_tableau("dopri5")
    tr = integrate(f, [1.0, -1.0], 0, 2, tab, StepController.adaptive(1e-8, 1e-6), theta)
    for n, rec in enumerate(tr.records):
        nxt = rk_step(f, rec.t, rec.h, rec.x, tab, theta).x_next
        expect = tr.records[n + 1].x if n + 1 < tr.N else tr.x_final
        assert np.array_equal(nxt, expect)


def test_checkpoints_are_copies():
    tr = integrate(LOGISTIC, [0.1], 0.0, 1.0, builtin_tableau("heun_euler"), StepController.fixed(0.25))
    xs = [r.x for r in tr.records]
    assert len({id(x) for x in xs}) == len(xs)
    assert not np.shares_memory(xs[-1], tr.x_final)


def test_grid_replay_reproduces_trajectory():
    f = MlpDynamics([2, 6, 2])
    theta = f.init_params(4)
    tab = builtin_tableau("bosh3")
    tr = integrate(f, [0.3, 0.1], 0, 2, tab, StepController.adaptive(1e-7, 1e-5), theta)
    again = integrate(f, [0.3, 0.1], 0, 2, tab, None, theta, grid=tr.steps)
    assert np.array_equal(tr.x_final, again.x_final)


# variational system ---------------------------------------------------------


def test_variational_zero_dynamics_is_identity():
    zero = analytic_dynamics("linear", {"d": 3})
    tab = builtin_tableau("dopri5")
    tr = integrate(zero, np.ones(3), 0, 1, tab, StepController.fixed(0.25), np.zeros(9))
    _, delta = integrate_variational(zero, np.ones(3), 0, 1, tab, tr, np.zeros(9))
    assert np.array_equal(delta, np.eye(3))


def test_variational_one_heun_step_matches_amplification():
    a, h = -0.8, 0.3
    f = analytic_dynamics("decay")
    tab = builtin_tableau("heun_euler")
    tr = integrate(f, [2.0], 0, h, tab, StepController.fixed(h), [a])
    _, delta = integrate_variational(f, [2.0], 0, h, tab, tr, [a])
    amp = 1 + h * (a + a * (1 + h * a)) / 2
    assert delta[0, 0] == pytest.approx(amp, abs=1e-15)
    assert tr.x_final[0] / 2.0 == pytest.approx(amp, abs=1e-15)


def test_variational_matches_finite_differences_on_mlp():
    f = MlpDynamics([4, 10, 4])
    theta = f.init_params(7)
    x0 = np.array([0.3, -0.2, 0.5, 0.1])
    tab = builtin_tableau("dopri5")
    tr = integrate(f, x0, 0, 1, tab, StepController.fixed(0.2), theta)
    assert tr.N == 5
    _, delta = integrate_variational(f, x0, 0, 1, tab, tr, theta)
    for i in range(4):
        col = central_diff(lambda z: integrate(f, z, 0, 1, tab, None, theta, grid=tr.steps).x_final[i], x0)
        assert np.max(np.abs(col - delta[i])) <= 1e-6 * max(1.0, np.max(np.abs(delta[i])))


@settings(max_examples=25, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.01, 0.5), st.sampled_from(TABLEAU_NAMES))
def test_linear_step_amplification_equals_variational(a, h, name):
    f = analytic_dynamics("decay")
    tab = builtin_tableau(name)
    tr = integrate(f, [1.0], 0, h, tab, StepController.fixed(h), [a])
    _, delta = integrate_variational(f, [1.0], 0, h, tab, tr, [a])
    assert delta[0, 0] == pytest.approx(tr.x_final[0], rel=1e-13, abs=1e-15)
