"""Monte Carlo laboratory for backward SDEs driven by integer-valued random measures."""

from .bsde import BsdeSolution, DriverSpec, residual_check, solve_finite_state, solve_regression
from .forward import JumpDiffusionSpec, PdmpSpec, PureJumpSpec, reconcile, simulate, simulate_ensemble
from .identify import ValueFunction, chain_rule_remainder, compute_h, identify_z, k_decomposition, verify_vanishing
from .kernels import MarkKernel
from .measure import CompensatorAtom, CompensatorSpec, MeasureRealization, PredictableField
from .paths import CadlagPath, PathEnsemble, TimeGrid

__version__ = "0.1.0"

__all__ = [
    "BsdeSolution",
    "CadlagPath",
    "CompensatorAtom",
    "CompensatorSpec",
    "DriverSpec",
    "JumpDiffusionSpec",
    "MarkKernel",
    "MeasureRealization",
    "PathEnsemble",
    "PdmpSpec",
    "PredictableField",
    "PureJumpSpec",
    "TimeGrid",
    "ValueFunction",
    "chain_rule_remainder",
    "compute_h",
    "identify_z",
    "k_decomposition",
    "reconcile",
    "residual_check",
    "simulate",
    "simulate_ensemble",
    "solve_finite_state",
    "solve_regression",
    "verify_vanishing",
]
