"""Numerical checks that ``Z`` and ``U`` are what the value function says they are.

Given ``v`` with ``Y_t = v(t, X_t)``:

* ``Z_t = dv/dx(t, X_t) * ratio(t, X_t)`` where ``ratio = d<X^c, M>/d<M>``;
* ``H_s(e) = U_s(e) - (v(s, X_{s-} + gamma~(s, e)) - v(s, X_{s-}))`` integrates
  to zero against ``mu - nu``, so ``C(H)_T = 0`` and ``H = l 1_K``;
* the remainder of the chain rule for ``v(t, X_t)`` is orthogonal to every
  continuous martingale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _rng
from .bsde import BsdeSolution, DriverSpec
from .forward import ForwardEnsemble, ForwardRealization, brownian_path
from .measure import (
    PredictableField,
    _rate_integrand,
    c_of_w_terminal,
    compensated_integral,
    compensated_terminal,
    g2_norm,
    hat_w,
)
from .paths import MIN_ORTHOGONALITY_PATHS, OrthogonalityResult, orthogonality_test

DEFAULT_G2_TOL = 1e-2
MIN_VANISHING_PATHS = 100
PROVENANCES = ("oracle", "closed-form", "regression-fit")


@dataclass(frozen=True, eq=False)
class ValueFunction:
    v: Callable
    dv_dx: Optional[Callable] = None
    provenance: str = "closed-form"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    def __call__(self, t, x) -> np.ndarray:
        return np.asarray(self.v(t, x), dtype=float)

    def shifted(self, c: float) -> "ValueFunction":
        v = self.v
        return ValueFunction(lambda t, x: np.asarray(v(t, x), dtype=float) + c, self.dv_dx, self.provenance)

    def gradient_check(self, times, xs, rel_tol: float = 1e-4, h: float = 1e-5) -> tuple[float, bool]:
        """Max relative gap between ``dv_dx`` and central differences on ``times x xs``."""
        if self.dv_dx is None:
            raise ValueError("no dv_dx to check")
        t, x = np.meshgrid(np.asarray(times, dtype=float), np.asarray(xs, dtype=float), indexing="ij")
        fd = (self(t, x + h) - self(t, x - h)) / (2 * h)
        an = np.asarray(self.dv_dx(t, x), dtype=float) * np.ones_like(t)
        err = float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))
        return err, err < rel_tol


@dataclass
class CheckResult:
    check_name: str
    statistic: float
    tolerance: float
    passed: bool
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"check_name": self.check_name, "statistic": self.statistic, "tolerance": self.tolerance, "pass": bool(self.passed), **self.extra}


# -- Z -----------------------------------------------------------------------


def identify_z(v: ValueFunction, solution: BsdeSolution, ensemble: ForwardEnsemble, bracket_ratio: Callable, tol: float = 5e-2) -> CheckResult:
    """dt-weighted RMSE of ``Z - dv/dx * ratio`` over paths and grid steps."""
    if v.dv_dx is None:
        raise ValueError("identify_z needs dv_dx")
    if solution.z is None:
        raise ValueError("the solution carries no Z (no continuous martingale in the model)")
    grid = ensemble.grid
    X = ensemble.values()[:, :-1]
    t = grid.points[None, :-1]
    target = np.asarray(v.dv_dx(t, X), dtype=float) * np.asarray(bracket_ratio(t, X), dtype=float)
    dt = grid.increments[None, :]
    rmse = float(np.sqrt(np.sum((solution.z - target) ** 2 * dt) / (X.shape[0] * grid.horizon)))
    return CheckResult("identify_z", rmse, tol, rmse < tol)


# -- H -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HField:
    """``H_s(e) = U_s(e) - (v(s, x + gamma~(s, e, x)) - v(s, x))`` with ``x = X_{s-}``."""

    u: PredictableField
    v: ValueFunction
    gamma_tilde: PredictableField

    def __call__(self, s, e, x) -> np.ndarray:
        g = self.gamma_tilde(s, e, x)
        return self.u(s, e, x) - (self.v(s, x + g) - self.v(s, x))

    @property
    def field(self) -> PredictableField:
        return PredictableField(self.__call__, name="H")

    def atom_values(self, r: ForwardRealization) -> np.ndarray:
        if not len(r.mu):
            return np.empty(0)
        x = np.atleast_1d(r.path.left_at(r.mu.times))
        return np.broadcast_to(self(r.mu.times, r.mu.marks, x), r.mu.times.shape).astype(float)


def compute_h(u, v: ValueFunction, gamma_tilde: PredictableField, realization: Optional[ForwardRealization] = None) -> HField:
    """Build ``H``; ``u`` may be a field or a :class:`BsdeSolution`."""
    if isinstance(u, BsdeSolution):
        u = u.u_field()
    h = HField(u, v, gamma_tilde)
    if realization is not None:
        h.atom_values(realization)  # evaluability on every atom
    return h


def h_atom_rmse(h: HField, ensemble) -> CheckResult:
    vals = [h.atom_values(r) for r in ensemble]
    allv = np.concatenate(vals + [np.empty(0)])
    rmse = float(np.sqrt(np.mean(allv**2))) if allv.size else 0.0
    return CheckResult("h_atom_rmse", rmse, np.nan, True, {"n_atoms": int(allv.size)})


def h_atom_table(h: HField, ensemble) -> list[dict]:
    """Per-atom rows (path, time, mark, left state, tag, H) for inspection."""
    rows = []
    for i, r in enumerate(ensemble):
        if not len(r.mu):
            continue
        vals = h.atom_values(r)
        x = np.atleast_1d(r.path.left_at(r.mu.times))
        for j, (s, e) in enumerate(r.mu.atoms):
            rows.append({"path": i, "time": s, "mark": e, "x_left": float(x[j]), "tag": r.tags[j], "H": float(vals[j])})
    return rows


def verify_vanishing(h: HField, ensemble, tol: float = DEFAULT_G2_TOL, nsigma: float = 3.0) -> CheckResult:
    """``int H d(mu - nu)`` has zero mean and ``||H||_G2^2 = E C(H)_T`` is below ``tol``."""
    if len(ensemble) < MIN_VANISHING_PATHS:
        raise ValueError(f"verify_vanishing needs at least {MIN_VANISHING_PATHS} paths")
    hf = h.field
    term = np.array([compensated_terminal(hf, r.mu, r.nu, ensemble.grid.horizon) for r in ensemble])
    mean = float(term.mean())
    se = float(term.std(ddof=1) / np.sqrt(term.size))
    g2 = g2_norm(hf, ensemble, ensemble.grid)
    ok = abs(mean) <= nsigma * se + 1e-12 and g2.value < tol
    return CheckResult("verify_vanishing", g2.value, tol, ok, {"g2_of_H": g2.value, "g2_stderr": g2.stderr, "terminal_mean": mean, "stderr": se})


@dataclass
class KDecomposition:
    l_fit: list
    off_k_l2: float
    on_k_residual: float

    def as_dict(self) -> dict:
        return {"l_fit": self.l_fit, "off_k_l2": self.off_k_l2, "on_k_residual": self.on_k_residual}


def k_decomposition(h: HField, ensemble) -> KDecomposition:
    """Split ``H`` into its continuous-compensator part and its behaviour on atoms.

    ``off_k_l2 = E int |H|^2 dnu^c`` and
    ``on_k_residual = E sum_{s in J} int |H_s - l_s 1_K(s)|^2 hat_nu_s(de)`` with
    ``l_s = hat H_s`` on ``K``.
    """
    hf = h.field
    l_fit, off, on = [], [], []
    for i, r in enumerate(ensemble):
        nu = r.nu
        pts = nu.integration_points(ensemble.grid)
        off.append(float(np.sum(_rate_integrand(hf, nu, pts, power=2))))
        resid = 0.0
        for a in nu.atoms:
            x = float(nu.left_state(a.time)[0])
            vals = np.broadcast_to(hf(a.time, a.marks, x), a.marks.shape)
            if a.is_full:
                l = hat_w(hf, nu, a.time)
                l_fit.append({"path": i, "time": a.time, "l": l})
                resid += float(np.dot(a.weights, (vals - l) ** 2))
            else:
                resid += float(np.dot(a.weights, vals**2))
        on.append(resid)
    return KDecomposition(l_fit, float(np.mean(off)), float(np.mean(on)))


# -- chain rule remainder ----------------------------------------------------


@dataclass
class RemainderReport:
    remainder: np.ndarray
    orthogonality: OrthogonalityResult
    martingale: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.remainder[:, -1]


def increment_field(v: ValueFunction, gamma_tilde: PredictableField) -> PredictableField:
    return PredictableField(lambda s, e, x: v(s, x + gamma_tilde(s, e, x)) - v(s, x), name="v increment")


def chain_rule_remainder(v: ValueFunction, ensemble: ForwardEnsemble, continuous: Optional[bool] = None) -> RemainderReport:
    """``A^v = v(t, X_t) - v(0, X_0) - int dv/dx dX^c - int (v(s, X_{s-} + gamma~) - v(s, X_{s-})) d(mu - nu)``.

    The jump term is written against the driving measure through ``gamma~``;
    at predictable boundary jumps ``gamma~ = 0`` and the compensated
    contribution of ``mu^X`` vanishes as well, so the two forms coincide.
    ``continuous=False`` gives the purely discontinuous variant (no ``X^c``
    term, no derivative needed). ``A^v`` is read on the base grid and tested
    for orthogonality against the model's Brownian motion, or against an
    independent one when the model has none.
    """
    grid = ensemble.grid
    base = grid.points
    has_c = all("dxc" in r.aux for r in ensemble)
    if continuous is None:
        continuous = has_c
    if continuous:
        if not has_c:
            raise ValueError("the model has no continuous martingale part")
        if v.dv_dx is None:
            raise ValueError("the continuous variant needs dv_dx")
    out = np.empty((len(ensemble), base.size))
    mart = np.empty_like(out)
    for i, r in enumerate(ensemble):
        path = r.path
        if has_c and not continuous and np.any(np.asarray(r.aux["dxc"]) != 0):
            raise ValueError("path has a continuous martingale part; the purely discontinuous variant does not apply")
        fpts = path.grid.points
        vv = v(fpts, path.values)
        a = vv - vv[0]
        if continuous:
            dv = np.asarray(v.dv_dx(fpts[:-1], path.values[:-1]), dtype=float) * np.ones(fpts.size - 1)
            a = a - np.concatenate([[0.0], np.cumsum(dv * r.aux["dxc"])])
        w = increment_field(v, r.gamma_tilde)
        a_path = a[np.searchsorted(fpts, base)]
        jump = compensated_integral(w, r.mu, r.nu, path.grid).at(base)
        out[i] = a_path - jump
        if "W" in r.aux:
            mart[i] = r.aux["W"]
        else:
            mart[i] = brownian_path(grid, _rng.stream(r.seed, _rng.BROWNIAN))
    if len(ensemble) >= MIN_ORTHOGONALITY_PATHS:
        orth = orthogonality_test(out, mart)
    else:
        orth = OrthogonalityResult(np.nan, np.nan, False, len(ensemble))
    return RemainderReport(out, orth, mart)


def driver_drift(v: ValueFunction, driver: DriverSpec, ensemble: ForwardEnsemble) -> np.ndarray:
    """``-int_0^t f(s, X_s, v(s, X_s), 0, Gamma_s) ds`` on the base grid, per path.

    ``Gamma_s`` is built from the increments of ``v``; left-point rule on each
    path's own grid.
    """
    grid = ensemble.grid
    base = grid.points
    out = np.empty((len(ensemble), base.size))
    for i, r in enumerate(ensemble):
        fpts = r.path.grid.points
        s, x = fpts[:-1], r.path.values[:-1]
        gam = np.zeros(s.size)
        if r.nu.rate is not None:
            rate = r.nu.rate
            w = rate.weights(s, x) * driver.rho_at(rate.nodes)[None, :]
            inc = v(s[:, None], x[:, None] + r.gamma_tilde(s[:, None], rate.nodes[None, :], x[:, None])) - v(s, x)[:, None]
            gam = np.sum(w * inc, axis=1)
        f = np.asarray(driver.f(s, x, v(s, x), 0.0, gam), dtype=float) * np.ones(s.size)
        cum = np.concatenate([[0.0], np.cumsum(f * np.diff(fpts))])
        out[i] = -cum[np.searchsorted(fpts, base)]
    return out


def c_of_h_terminal(h: HField, r: ForwardRealization, grid=None) -> float:
    return c_of_w_terminal(h.field, r.nu, grid)
