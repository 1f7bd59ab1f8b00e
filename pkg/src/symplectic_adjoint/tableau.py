"""Explicit Runge-Kutta methods as data, and the adjoint coefficients derived from them.

Each forward method is a Butcher tableau. ``derive_adjoint_coefficients`` turns a
tableau into the coefficients of the partner integrator that propagates the adjoint
variable backward in time so that the pair conserves ``lambda^T delta`` exactly.
Stages with a vanishing weight ``b_i`` are handled by a separate branch whose
weight is the step size itself, so methods such as Dormand-Prince (``b_2 = 0``)
are supported without modification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdjointCoefficients",
    "ButcherTableau",
    "UnknownMethod",
    "builtin_tableau",
    "derive_adjoint_coefficients",
    "TABLEAU_NAMES",
]

_TOL = 1e-14


class UnknownMethod(KeyError):
    """Raised for a tableau name that is not built in."""


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit Runge-Kutta method.

    ``order`` is the propagating order, ``error_order`` the order of the embedded
    estimate (used by the step controller exponent). When ``fsal`` is set the final
    row of ``a`` equals ``b``, so the last stage of a step is the first stage of the
    next one and is only needed for the error estimate.
    """

    name: str
    order: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    b_err: np.ndarray | None = None
    error_order: int | None = None
    fsal: bool = False

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        b = np.array(self.b, dtype=float)
        c = np.array(self.c, dtype=float)
        s = b.shape[0]
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError(f"{self.name}: inconsistent tableau shapes {a.shape}, {b.shape}, {c.shape}")
        for arr in (a, b, c):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if self.b_err is not None:
            be = np.array(self.b_err, dtype=float)
            if be.shape != (s,):
                raise ValueError(f"{self.name}: b_err must have length {s}")
            be.setflags(write=False)
            object.__setattr__(self, "b_err", be)

    @property
    def stages(self) -> int:
        """Rows of the tableau (including a trailing FSAL stage)."""
        return self.b.shape[0]

    @property
    def evals_per_step(self) -> int:
        """Function evaluations per accepted step once FSAL reuse is accounted for."""
        return self.stages - 1 if self.fsal else self.stages

    @property
    def effective_stages(self) -> int:
        """Number of leading stages that influence ``x_{n+1}``.

        A trailing FSAL stage has zero weight and feeds no other stage; gradient
        engines recompute only the effective prefix.
        """
        s = self.stages
        while s > 1 and self.b[s - 1] == 0.0 and not np.any(self.a[s:, s - 1]):
            s -= 1
        return s

    @property
    def adaptive(self) -> bool:
        return self.b_err is not None

    def check(self) -> None:
        """Raise ``ValueError`` unless the tableau is explicit and self-consistent."""
        if np.any(np.triu(self.a) != 0.0):
            raise ValueError(f"{self.name}: a must be strictly lower triangular")
        if abs(float(np.sum(self.b)) - 1.0) > _TOL:
            raise ValueError(f"{self.name}: weights do not sum to one")
        if np.max(np.abs(self.a.sum(axis=1) - self.c)) > _TOL:
            raise ValueError(f"{self.name}: row sums of a differ from c")
        if self.fsal and np.max(np.abs(self.a[-1] - self.b)) > _TOL:
            raise ValueError(f"{self.name}: FSAL tableau must have b equal to the last row of a")


@dataclass(frozen=True)
class AdjointCoefficients:
    """Coefficients of the backward-explicit adjoint integrator paired with a tableau.

    The stage adjoints are formed backward from ``lambda_{n+1}``::

        Lam_i = lambda_{n+1} - h * sum_j tb_j * coupling[i, j] * l_j    (i not in zero_set)
        Lam_i =              -     sum_j tb_j * coupling[i, j] * l_j    (i in zero_set)
        lambda_n = lambda_{n+1} - h * sum_i tb_i * l_i

    where ``tb_i = b_i`` for ordinary stages and ``tb_i = h`` for stages in the zero
    set. ``coupling[i, j]`` is ``a[j, i] / b[i]`` or ``a[j, i]`` respectively, so it is
    nonzero only for ``j > i``.
    """

    stages: int
    b: np.ndarray
    zero_set: frozenset[int]
    coupling: np.ndarray
    _mask: np.ndarray = field(repr=False)

    def tilde_b(self, h: float) -> np.ndarray:
        """Per-step stage weights with the zero-set entries resolved to ``h``."""
        return np.where(self._mask, h, self.b)

    def realized_matrix(self) -> np.ndarray:
        """Forward-form matrix ``A`` of the partner method for stages outside the zero set.

        Entries touching the zero set are NaN, since those stages have no
        Runge-Kutta representation.
        """
        s = self.stages
        A = np.full((s, s), np.nan)
        for i in range(s):
            if i in self.zero_set:
                continue
            for j in range(s):
                if j in self.zero_set:
                    continue
                A[i, j] = self.b[j] - self.b[j] * self.coupling[i, j]
        return A

    def symplectic_residual(self, a: np.ndarray) -> np.ndarray:
        """``b_i A_ij + b_j a_ji - b_i b_j`` for ordinary index pairs (NaN elsewhere)."""
        A = self.realized_matrix()
        b = self.b
        a = np.asarray(a)[: self.stages, : self.stages]
        return b[:, None] * A + b[None, :] * a.T - b[:, None] * b[None, :]

    def dependencies(self, i: int) -> list[int]:
        """Stage indices ``j`` whose ``l_j`` enters ``Lam_i``."""
        return [j for j in range(self.stages) if self.coupling[i, j] != 0.0]


def derive_adjoint_coefficients(tab: ButcherTableau) -> AdjointCoefficients:
    """Build the adjoint partner of ``tab`` over its effective stages."""
    s = tab.effective_stages
    a = tab.a[:s, :s]
    b = tab.b[:s].copy()
    mask = b == 0.0
    coupling = np.zeros((s, s))
    for i in range(s):
        for j in range(s):
            if a[j, i] == 0.0:
                continue
            coupling[i, j] = a[j, i] if mask[i] else a[j, i] / b[i]
    for arr in (b, coupling, mask):
        arr.setflags(write=False)
    zero = frozenset(int(i) for i in np.flatnonzero(mask))
    return AdjointCoefficients(stages=s, b=b, zero_set=zero, coupling=coupling, _mask=mask)


def _heun_euler() -> ButcherTableau:
    return ButcherTableau(
        name="heun_euler",
        order=2,
        a=[[0.0, 0.0], [1.0, 0.0]],
        b=[0.5, 0.5],
        c=[0.0, 1.0],
        b_err=[1.0, 0.0],
        error_order=1,
    )


def _bosh3() -> ButcherTableau:
    return ButcherTableau(
        name="bosh3",
        order=3,
        a=[
            [0.0, 0.0, 0.0, 0.0],
            [1 / 2, 0.0, 0.0, 0.0],
            [0.0, 3 / 4, 0.0, 0.0],
            [2 / 9, 1 / 3, 4 / 9, 0.0],
        ],
        b=[2 / 9, 1 / 3, 4 / 9, 0.0],
        c=[0.0, 1 / 2, 3 / 4, 1.0],
        b_err=[7 / 24, 1 / 4, 1 / 3, 1 / 8],
        error_order=2,
        fsal=True,
    )


def _dopri5() -> ButcherTableau:
    b = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
    a = np.zeros((7, 7))
    a[1, :1] = [1 / 5]
    a[2, :2] = [3 / 40, 9 / 40]
    a[3, :3] = [44 / 45, -56 / 15, 32 / 9]
    a[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
    a[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
    a[6, :6] = b[:6]
    return ButcherTableau(
        name="dopri5",
        order=5,
        a=a,
        b=b,
        c=[0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
        b_err=[5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40],
        error_order=4,
        fsal=True,
    )


# Dormand-Prince 8(5,3) (DOP853), 12 stages; embedded weights from the 5th-order estimate.
_DOP853_A = [
    [],
    [0.05260015195876773],
    [0.0197250569845379, 0.0591751709536137],
    [0.02958758547680685, 0.0, 0.08876275643042054],
    [0.2413651341592667, 0.0, -0.8845494793282861, 0.924834003261792],
    [0.037037037037037035, 0.0, 0.0, 0.17082860872947386, 0.12546768756682242],
    [0.037109375, 0.0, 0.0, 0.17025221101954405, 0.06021653898045596, -0.017578125],
    [0.03709200011850479, 0.0, 0.0, 0.17038392571223998, 0.10726203044637328,
     -0.015319437748624402, 0.008273789163814023],
    [0.6241109587160757, 0.0, 0.0, -3.3608926294469414, -0.868219346841726,
     27.59209969944671, 20.154067550477894, -43.48988418106996],
    [0.47766253643826434, 0.0, 0.0, -2.4881146199716677, -0.590290826836843,
     21.230051448181193, 15.279233632882423, -33.28821096898486, -0.020331201708508627],
    [-0.9371424300859873, 0.0, 0.0, 5.186372428844064, 1.0914373489967295,
     -8.149787010746927, -18.52006565999696, 22.739487099350505, 2.4936055526796523,
     -3.0467644718982196],
    [2.273310147516538, 0.0, 0.0, -10.53449546673725, -2.0008720582248625,
     -17.9589318631188, 27.94888452941996, -2.8589982771350235, -8.87285693353063,
     12.360567175794303, 0.6433927460157636],
]
_DOP853_B = [
    0.054293734116568765, 0.0, 0.0, 0.0, 0.0, 4.450312892752409, 1.8915178993145003,
    -5.801203960010585, 0.3111643669578199, -0.1521609496625161, 0.20136540080403034,
    0.04471061572777259,
]
_DOP853_C = [
    0.0, 0.05260015195876773, 0.0789002279381516, 0.1183503419072274, 0.2816496580927726,
    0.3333333333333333, 0.25, 0.3076923076923077, 0.6512820512820513, 0.6,
    0.8571428571428571, 1.0,
]
_DOP853_E5 = [
    0.01312004499419488, 0.0, 0.0, 0.0, 0.0, -1.2251564463762044, -0.4957589496572502,
    1.6643771824549864, -0.35032884874997366, 0.3341791187130175, 0.08192320648511571,
    -0.022355307863886294,
]


def _dopri8() -> ButcherTableau:
    a = np.zeros((12, 12))
    for i, row in enumerate(_DOP853_A):
        a[i, : len(row)] = row
    b = np.array(_DOP853_B)
    return ButcherTableau(
        name="dopri8",
        order=8,
        a=a,
        b=b,
        c=_DOP853_C,
        b_err=b - np.array(_DOP853_E5),
        error_order=7,
    )


_BUILDERS = {
    "heun_euler": _heun_euler,
    "bosh3": _bosh3,
    "dopri5": _dopri5,
    "dopri8": _dopri8,
}
TABLEAU_NAMES = tuple(_BUILDERS)
_CACHE: dict[str, ButcherTableau] = {}


def builtin_tableau(name: str) -> ButcherTableau:
    """Return one of ``heun_euler``, ``bosh3``, ``dopri5``, ``dopri8``."""
    if name not in _BUILDERS:
        raise UnknownMethod(name)
    if name not in _CACHE:
        _CACHE[name] = _BUILDERS[name]()
    return _CACHE[name]
