"""
Loose tolerances hurt the continuous adjoint
============================================

Sweep the absolute tolerance with rtol = 100 x atol. The continuous adjoint
integrates its own backward system and its error grows with the tolerance. The
symplectic adjoint reuses the forward grid and stays exact for that grid.
"""

import numpy as np

from symplectic_adjoint import (StepController, builtin_problem, builtin_tableau, grad_adjoint_continuous,
                                grad_backprop_full, grad_symplectic_adjoint)

problem = builtin_problem("mlp_node")
tab = builtin_tableau("dopri5")
f, x0, theta = problem.dynamics, problem.x0, problem.theta0


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


print(f"{'atol':>8}{'N':>4}{'adjoint err':>14}{'symplectic err':>16}")
for atol in (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3):
    ctrl = StepController.adaptive(atol, 100 * atol)
    ref = grad_backprop_full(f, x0, theta, 0, 1, tab, ctrl, problem.loss)
    adj = grad_adjoint_continuous(f, x0, theta, 0, 1, tab, ctrl, problem.loss)
    sym = grad_symplectic_adjoint(f, x0, theta, 0, 1, tab, ctrl, problem.loss)
    print(f"{atol:>8.0e}{sym.accounting.steps_accepted:>4}"
          f"{rel(adj.grad_theta, ref.grad_theta):>14.1e}{rel(sym.grad_theta, ref.grad_theta):>16.1e}")

# the same table from the command line:
#   symplectic-adjoint sweep-tolerance --problem mlp_node --engines adjoint symplectic
