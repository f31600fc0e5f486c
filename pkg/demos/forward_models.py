"""Simulate the three forward models and look at what each one records.

Run with ``python demos/forward_models.py``.
"""

import numpy as np

from jumpbsde.forward import JumpDiffusionSpec, PdmpSpec, PureJumpSpec, reconcile, simulate, simulate_ensemble
from jumpbsde.kernels import MarkKernel
from jumpbsde.measure import classify_events
from jumpbsde.paths import TimeGrid

grid = TimeGrid.uniform(1.0, 100)

# Jump-diffusion: Brownian noise plus rate-1 jumps of size 1.
jd = JumpDiffusionSpec(b=lambda x: -x, sigma=lambda x: 0.5, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=0.0)
r = simulate(jd, grid, seed=1)
print("jump-diffusion: jump times", np.round(r.mu.times, 4), "refined grid size", len(r.path.grid))
ev = classify_events(r.mu, r.nu)
print("  atoms of the compensator (J):", ev.J.size, " full atoms (K):", ev.K.size)

# Two-state chain: the random measure records post-jump states.
chain = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
r = simulate(chain, grid, seed=2)
print("two-state chain: events", [(round(t, 4), e) for t, e in r.mu.atoms])

# Marginal check against the matrix exponential: P(X_1 = 0.8 | X_0 = 0.2) = (1 - e^-3) / 3.
ens = simulate_ensemble(chain, TimeGrid.uniform(1.0, 20), 4000, master_seed=3)
p_hat = np.mean(ens.values()[:, -1] == 0.8)
print(f"  P(X_1 = 0.8): simulated {p_hat:.4f}, exact {(1 - np.exp(-3)) / 3:.4f}")

# PDMP on [0, 1] moving at unit speed and restarting at 0.5 on hitting 1.
pdmp = PdmpSpec(h=lambda x: 1.0, lam=lambda x: 0.0, beta=lambda x: 0.5, x0=0.5)
r = simulate(pdmp, TimeGrid.uniform(2.0, 40), seed=4)
print("PDMP: boundary hits at", r.mu.times, "tags", r.tags)
print("  compensator atoms:", [(a.time, a.marks.tolist(), a.weights.tolist()) for a in r.nu.atoms])
print("  reconcile violations:", len(reconcile(r).violations))
