"""Identify Z = sigma dv/dx: first on a jump-diffusion martingale with a
closed-form value function, then on geometric Brownian motion with a
Crank-Nicolson value function.

Run with ``python demos/jump_diffusion_z.py``.
"""

import numpy as np

from jumpbsde.bsde import DriverSpec, solve_regression
from jumpbsde.forward import JumpDiffusionSpec, simulate_ensemble
from jumpbsde.identify import ValueFunction, chain_rule_remainder, identify_z
from jumpbsde.kernels import MarkKernel
from jumpbsde.oracle import pde_reference_v
from jumpbsde.paths import TimeGrid

# X = W + N - t with g(x) = x and f = 0: v(t, x) = x, Z = 1, U = 1.
spec = JumpDiffusionSpec(b=lambda x: 0.0, sigma=lambda x: 1.0, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=0.0)
ens = simulate_ensemble(spec, TimeGrid.uniform(1.0, 50), 1000, master_seed=8)
sol = solve_regression(ens, DriverSpec(lambda x: np.asarray(x, dtype=float)), order=2, u_order=0)
identity = ValueFunction(lambda t, x: np.asarray(x, dtype=float), lambda t, x: np.ones(np.broadcast(t, x).shape))
print("martingale: Z rmse", identify_z(identity, sol, ens, lambda t, x: np.ones(np.shape(x))).statistic)
print("  chain-rule remainder of v = x, max |A|:", np.abs(chain_rule_remainder(identity, ens).remainder).max())

# Geometric Brownian motion with a call payoff.
b = lambda x: 0.05 * np.asarray(x, dtype=float)  # noqa: E731
sig = lambda x: 0.3 * np.asarray(x, dtype=float)  # noqa: E731
g = lambda x: np.maximum(np.asarray(x, dtype=float) - 1.0, 0.0)  # noqa: E731
ens = simulate_ensemble(JumpDiffusionSpec(b=b, sigma=sig, x0=1.0), TimeGrid.uniform(1.0, 50), 2000, master_seed=11)
tab = pde_reference_v(b, sig, g, 0.0, 6.0, 600, 1.0, 400)
sol = solve_regression(ens, DriverSpec(g), order=3)
res = identify_z(ValueFunction(tab, tab.dv_dx, "oracle"), sol, ens, lambda t, x: sig(x))
print(f"GBM call: Y_0 {sol.y0:.4f} vs PDE {float(tab(0.0, 1.0)):.4f}; Z rmse {res.statistic:.4f} (tol 0.05)")
