"""
Memory grows with stages for checkpointing, not for the symplectic adjoint
==========================================================================

Per-step checkpointing keeps a tape for every stage of the step being
reversed. The symplectic adjoint keeps only the stage states and one tape, so
its advantage widens as the method gets more stages.
"""

from symplectic_adjoint import (StepController, builtin_problem, builtin_tableau, grad_step_checkpoint,
                                grad_symplectic_adjoint)
from symplectic_adjoint.tableau import TABLEAU_NAMES

problem = builtin_problem("mlp_node")
N = 64
ctrl = StepController.fixed(1 / N)

print(f"{'tableau':<11}{'stages':>7}{'step_checkpoint':>17}{'symplectic':>12}{'ratio':>8}")
for name in TABLEAU_NAMES:
    tab = builtin_tableau(name)
    args = (problem.dynamics, problem.x0, problem.theta0, 0, 1, tab, ctrl, problem.loss)
    ck = grad_step_checkpoint(*args).accounting.peak_retained_scalars
    sy = grad_symplectic_adjoint(*args).accounting.peak_retained_scalars
    print(f"{name:<11}{tab.effective_stages:>7}{ck:>17}{sy:>12}{sy / ck:>8.2f}")
