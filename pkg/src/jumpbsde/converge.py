"""Convergence studies: Euler weak order, RK4 order of the finite-state solver,
and the variance of the discrete Brownian bracket.

The weak-error estimator is coupled: every level reuses the per-path seeds
of the reference run, and the recursive Brownian construction makes the
dyadic grids see the same Brownian path. The difference
``g(X^l_T) - g(X^ref_T)`` then has a standard error far below the bias.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _rng
from .bsde import DriverSpec, solve_finite_state
from .forward import JumpDiffusionSpec, PureJumpSpec, brownian_path, simulate
from .oracle import GeneratorMatrix, linear_driver_v
from .paths import TimeGrid, bracket_values


@dataclass
class RateTable:
    """One row per level; ``ratio[i] = error[i-1] / error[i]``."""

    quantity: str
    steps: list
    error: list
    stderr: list
    extra: dict = field(default_factory=dict)

    @property
    def ratios(self) -> list:
        e = self.error
        return [abs(e[i - 1]) / abs(e[i]) if e[i] != 0 else float("inf") for i in range(1, len(e))]

    def rows(self) -> list[dict]:
        r = [float("nan")] + self.ratios
        return [{"quantity": self.quantity, "steps": s, "error": e, "stderr": se, "ratio": q} for s, e, se, q in zip(self.steps, self.error, self.stderr, r)]


def _dyadic(levels: Sequence[int], reference: int) -> None:
    for n in levels:
        if reference % n or (reference // n) & (reference // n - 1):
            raise ValueError(f"{n} steps do not divide {reference} by a power of two; the Brownian coupling needs dyadic levels")


def weak_error_study(spec: JumpDiffusionSpec, g: Callable, T: float, levels: Sequence[int], reference_steps: int, n_paths: int, master_seed: int) -> RateTable:
    """Coupled Euler weak error ``E[g(X^l_T)] - E[g(X^ref_T)]`` per level."""
    _dyadic(levels, reference_steps)
    seeds = [_rng.path_seed(master_seed, i) for i in range(n_paths)]
    ref = np.array([g(simulate(spec, TimeGrid.uniform(T, reference_steps), s).path.terminal) for s in seeds], dtype=float)
    err, se = [], []
    for n in levels:
        grid = TimeGrid.uniform(T, n)
        with warnings.catch_warnings():
            # coarse levels are coarse on purpose
            warnings.filterwarnings("ignore", message="coarse grid for the jump activity")
            d = np.array([g(simulate(spec, grid, s).path.terminal) for s in seeds], dtype=float) - ref
        err.append(float(d.mean()))
        se.append(float(d.std(ddof=1) / np.sqrt(n_paths)))
    return RateTable("euler_weak_error", list(levels), err, se, {"reference_steps": reference_steps, "reference_mean": float(ref.mean())})


def rk4_order_study(spec: PureJumpSpec, driver: DriverSpec, T: float, steps: Sequence[int], linear: dict) -> RateTable:
    """Max error of :func:`solve_finite_state` at ``t = 0`` against the augmented matrix exponential."""
    states = np.asarray(spec.state_space, dtype=float)
    q = GeneratorMatrix(spec.generator, states)
    g = np.asarray(driver.terminal(states), dtype=float)
    exact = linear_driver_v(q, g, T, c0=linear.get("c0", 0.0), cx=linear.get("cx", 0.0), a=linear.get("a", 0.0), cu=linear.get("cu", 0.0))
    err = []
    for n in steps:
        table = solve_finite_state(spec, driver, T, steps=n, stiff_tol=np.inf)
        err.append(float(np.max(np.abs(table.values[0] - exact))))
    return RateTable("rk4_error", list(steps), err, [0.0] * len(err))


def bracket_variance_study(T: float, levels: Sequence[int], n_paths: int, master_seed: int) -> RateTable:
    """Sample variance of ``sum (Delta W)^2`` per grid; it equals ``2 T dt`` in theory.

    ``error`` holds the variance and ``extra`` the means, which should all be
    close to ``T``.
    """
    var, se, means = [], [], []
    for n in levels:
        grid = TimeGrid.uniform(T, n)
        w = np.stack([brownian_path(grid, _rng.stream(_rng.path_seed(master_seed, i), _rng.BROWNIAN)) for i in range(n_paths)])
        b = bracket_values(w, w)
        var.append(float(b.var(ddof=1)))
        # standard error of a sample variance for (near-)Gaussian data
        se.append(float(b.var(ddof=1) * np.sqrt(2.0 / (n_paths - 1))))
        means.append(float(b.mean()))
    return RateTable("bracket_variance", list(levels), var, se, {"means": means, "theory": [2 * T * T / n for n in levels]})
