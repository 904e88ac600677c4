"""
Convergence order of the fixed-step solvers
===========================================

Integrate dh/dt = h from h(0) = 1 to t = 1 and watch the error shrink as the
step count doubles. Euler should halve its error each time, RK4 should
divide it by about sixteen. The adaptive solver is shown for contrast.
"""
import math

import numpy as np

from segnode import autodiff as ad
from segnode.autodiff import Tensor
from segnode.ode import OdeState, SolverConfig, integrate


def growth(t, s):
    return OdeState([ad.scale(s[0], 1.0)])


start = OdeState([Tensor(np.ones(1))])

for method in ("euler", "rk4"):
    prev = None
    print(method)
    for n in (4, 8, 16, 32, 64):
        end, stats = integrate(growth, start, SolverConfig(method, step_count=n))
        err = abs(end[0].data[0] - math.e)
        ratio = f"{prev / err:6.2f}" if prev else "     -"
        print(f"  steps={n:3d} error={err:.3e} ratio={ratio} nfe={stats.nfe}")
        prev = err

# The adaptive solver picks its own steps; tighter tolerances cost more evaluations.
for rtol in (1e-3, 1e-6, 1e-9):
    end, stats = integrate(growth, start, SolverConfig("dopri5", rtol=rtol, atol=rtol * 1e-2))
    print(f"dopri5 rtol={rtol:.0e} error={abs(end[0].data[0] - math.e):.2e} nfe={stats.nfe}")
