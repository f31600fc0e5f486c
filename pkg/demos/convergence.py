"""Convergence studies: Euler weak order, RK4 order of the finite-state
solver and the variance of the discrete Brownian bracket.

Run with ``python demos/convergence.py``.
"""

from jumpbsde.bsde import DriverSpec
from jumpbsde.converge import bracket_variance_study, rk4_order_study, weak_error_study
from jumpbsde.forward import JumpDiffusionSpec, PureJumpSpec
from jumpbsde.kernels import MarkKernel

ou = JumpDiffusionSpec(b=lambda x: -x, sigma=lambda x: 1.0, gamma=lambda x, e: e, levy=MarkKernel.point(1.0, 1.0), x0=1.0)
chain = PureJumpSpec.from_generator([0.2, 0.8], [[-1.0, 1.0], [2.0, -2.0]], 0.2)

tables = [
    weak_error_study(ou, lambda x: x, 1.0, [4, 8, 16, 32], 1024, 1000, master_seed=10),
    rk4_order_study(chain, DriverSpec.linear(lambda x: x, cx=1.0, a=0.5), 1.0, [10, 20, 40, 80], {"cx": 1.0, "a": 0.5}),
    bracket_variance_study(1.0, [64, 128, 256], 1000, master_seed=11),
]
for t in tables:
    print(t.quantity)
    for row in t.rows():
        print(f"  steps {row['steps']:>4}  error {row['error']:.3e}  stderr {row['stderr']:.1e}  ratio {row['ratio']:.2f}")
