"""Exact gradients of ODE solutions by the symplectic adjoint method.

The package pairs an explicit Runge-Kutta solver with a backward integrator
chosen so that the discrete adjoint is the exact gradient of the discrete
forward map, and provides four other gradient engines for comparison.
"""

from .accounting import AccountingReport, MemoryMeter
from .autodiff import (
    DynamicsFunction,
    MlpDynamics,
    ShapeError,
    Tape,
    TapeConsumed,
    UnknownProblem,
    analytic_dynamics,
    load_parameters,
    save_parameters,
    tape_eval,
    tape_vjp,
)
from .engines import (
    ENGINES,
    GradientResult,
    LossSpec,
    TrainingDiverged,
    UnknownEngine,
    compute_gradient,
    grad_adjoint_continuous,
    grad_backprop_full,
    grad_baseline_checkpoint,
    grad_step_checkpoint,
    grad_symplectic_adjoint,
    grad_with_running_cost,
    train_toy,
)
from .problems import Problem, builtin_problem
from .solver import (
    NonFiniteDynamics,
    StepController,
    StepSizeUnderflow,
    Trajectory,
    integrate,
    integrate_variational,
    rk_step,
)
from .tableau import ButcherTableau, UnknownMethod, builtin_tableau, derive_adjoint_coefficients

__version__ = "0.1.0"
