import numpy as np
import pytest

from symplectic_adjoint.tableau import (
    TABLEAU_NAMES,
    ButcherTableau,
    UnknownMethod,
    builtin_tableau,
    derive_adjoint_coefficients,
)


@pytest.mark.parametrize("name", TABLEAU_NAMES)
def test_builtin_tableaus_are_consistent(name):
    tab = builtin_tableau(name)
    tab.check()
    assert np.all(np.triu(tab.a) == 0.0)
    assert abs(tab.b.sum() - 1.0) <= 1e-14
    assert np.max(np.abs(tab.a.sum(axis=1) - tab.c)) <= 1e-14
    if tab.fsal:
        assert np.max(np.abs(tab.a[-1] - tab.b)) <= 1e-14
    assert abs(tab.b_err.sum() - 1.0) <= 1e-14


@pytest.mark.parametrize(
    "name, order, evals",
    [("heun_euler", 2, 2), ("bosh3", 3, 3), ("dopri5", 5, 6), ("dopri8", 8, 12)],
)
def test_orders_and_evaluations_per_step(name, order, evals):
    tab = builtin_tableau(name)
    assert tab.order == order
    assert tab.evals_per_step == evals
    assert tab.effective_stages == evals


def test_dopri5_stores_seven_rows_with_fsal():
    tab = builtin_tableau("dopri5")
    assert tab.stages == 7 and tab.fsal


def test_unknown_method():
    with pytest.raises(UnknownMethod):
        builtin_tableau("rk4_classic")


def test_tableau_arrays_are_read_only():
    tab = builtin_tableau("heun_euler")
    with pytest.raises(ValueError):
        tab.a[0, 0] = 1.0


def test_check_rejects_implicit_tableau():
    tab = ButcherTableau("bad", 1, a=[[0.5, 0.0], [0.0, 0.5]], b=[0.5, 0.5], c=[0.5, 0.5])
    with pytest.raises(ValueError, match="lower triangular"):
        tab.check()


def test_heun_euler_adjoint_coefficients():
    co = derive_adjoint_coefficients(builtin_tableau("heun_euler"))
    assert co.zero_set == frozenset()
    # stage 2 has no later stages: Lam_2 = lambda_{n+1}
    assert co.dependencies(1) == []
    # Lam_1 = lambda_{n+1} - h * b2 * (a21 / b1) * l_2 = lambda_{n+1} - h * l_2
    h = 0.3
    assert co.tilde_b(h)[1] * co.coupling[0, 1] == pytest.approx(1.0, abs=0)


def test_dopri5_zero_set_resolves_to_step_size():
    co = derive_adjoint_coefficients(builtin_tableau("dopri5"))
    assert co.stages == 6
    assert co.zero_set == frozenset({1})
    tb = co.tilde_b(0.125)
    assert tb[1] == 0.125
    assert tb[0] == 35 / 384


def test_dopri8_zero_set():
    co = derive_adjoint_coefficients(builtin_tableau("dopri8"))
    assert co.zero_set == frozenset({1, 2, 3, 4})


@pytest.mark.parametrize("name", TABLEAU_NAMES)
def test_symplectic_condition_residuals(name):
    tab = builtin_tableau(name)
    co = derive_adjoint_coefficients(tab)
    res = co.symplectic_residual(tab.a)
    ok = [i for i in range(co.stages) if i not in co.zero_set]
    sub = res[np.ix_(ok, ok)]
    assert np.all(np.isfinite(sub))
    assert np.max(np.abs(sub)) <= 1e-14


@pytest.mark.parametrize("name", TABLEAU_NAMES)
def test_backward_sweep_is_explicit(name):
    co = derive_adjoint_coefficients(builtin_tableau(name))
    for i in range(co.stages):
        assert all(j > i for j in co.dependencies(i))
    assert np.all(np.tril(co.coupling) == 0.0)


def test_all_nonzero_weights_give_empty_zero_set():
    # classic RK4
    a = np.zeros((4, 4))
    a[1, 0] = a[2, 1] = 0.5
    a[3, 2] = 1.0
    tab = ButcherTableau("rk4", 4, a=a, b=[1 / 6, 1 / 3, 1 / 3, 1 / 6], c=[0, 0.5, 0.5, 1])
    tab.check()
    co = derive_adjoint_coefficients(tab)
    assert co.zero_set == frozenset()
    assert np.nanmax(np.abs(co.symplectic_residual(tab.a))) <= 1e-14
