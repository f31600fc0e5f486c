"""The measure-calculus layer: C(W) in three forms, the two norms, and the
transfer identity on a simulated PDMP path.

Run with ``python demos/measure_calculus.py``.
"""

import numpy as np

from jumpbsde.forward import PdmpSpec, PureJumpSpec, simulate, simulate_ensemble
from jumpbsde.kernels import MarkKernel
from jumpbsde.measure import (
    CompensatorAtom,
    CompensatorSpec,
    PredictableField,
    c_of_w_terminal,
    compensated_integral,
    g2_norm,
    l2_density_terminal,
    l2_norm,
    transfer_identity_check,
)
from jumpbsde.paths import TimeGrid

grid = TimeGrid.uniform(1.0, 16)

# A compensator with a rate part and one atom of mass 0.6 at t = 0.5.
nu = CompensatorSpec(
    rate=MarkKernel.discrete([0.5, 1.5], [1.0, 0.5]),
    atoms=(CompensatorAtom(0.5, np.array([1.0, 2.0]), np.array([0.2, 0.4])),),
)
w = PredictableField(lambda s, e, x: np.cos(3 * np.asarray(s)) + np.asarray(e) ** 2)
for variant in ("definition", "decomposed", "restricted"):
    print(f"C(W)_T [{variant:>10}] = {c_of_w_terminal(w, nu, grid, variant):.15f}")
print(f"int |W|^2 dnu          = {l2_density_terminal(w, nu, grid):.15f}  (always >= C(W)_T)")

# Norms over an ensemble of chain paths.
chain = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)
ens = simulate_ensemble(chain, TimeGrid.uniform(1.0, 50), 2000, master_seed=5)
mark = PredictableField(lambda s, e, x: np.asarray(e) - np.asarray(x))
g2, l2 = g2_norm(mark, ens), l2_norm(mark, ens)
print(f"||W||_G2^2 = {g2.value:.4f} +- {g2.stderr:.4f}   ||W||_L2^2 = {l2.value:.4f} +- {l2.stderr:.4f}")

# Compensated integral of the jump size: a martingale, so its mean is near 0.
term = np.array([compensated_integral(mark, r.mu, r.nu, ens.grid).terminal for r in ens])
print(f"E int (e - x) d(mu - nu) = {term.mean():.4f} +- {term.std(ddof=1) / np.sqrt(term.size):.4f}")

# Transfer identity on a PDMP path with boundary hits.
r = simulate(PdmpSpec(h=lambda x: 1.0, lam=lambda x: 0.0, beta=lambda x: 0.5, x0=0.5), TimeGrid.uniform(2.0, 40), seed=6)
rep = transfer_identity_check(None, r.path, r.mu, r.gamma_tilde, r.xp_jumps)
print("transfer identity: lhs", rep.lhs, "rhs", rep.rhs, "max diff", rep.max_abs_diff)
