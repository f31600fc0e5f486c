"""Integer-valued random measures, their compensators and pathwise calculus.

Conventions
-----------
A compensator is ``nu(ds de) = rate(s, X_{s-}; de) ds + sum_S hat_nu_S(de) delta_S(ds)``.
The rate part is a :class:`~jumpbsde.kernels.MarkKernel`; the atoms are
:class:`CompensatorAtom` objects with total mass in ``(0, 1]``.

Fields ``W(s, e, x)`` receive the left limit ``x = X_{s-}`` of the driving path
and nothing else, which is how predictability is enforced.

Time integrals of the rate part use the left-point rule on the path's own
grid. For piecewise-constant paths this is exact, and it is the same rule the
Euler schemes in :mod:`jumpbsde.forward` use for their compensator drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .kernels import MarkKernel
from .paths import TIME_TOL, CadlagPath, TimeGrid

MASS_TOL = 1e-12


class MeasureError(ValueError):
    """Non-integrable field or malformed measure data."""


@dataclass(frozen=True, eq=False)
class MeasureRealization:
    """Atoms ``(s_i, e_i)`` of an integer-valued random measure on ``(0, T] x R``."""

    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    marks: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        m = np.asarray(self.marks, dtype=float).reshape(-1)
        if t.shape != m.shape:
            raise ValueError("one mark per atom time is required")
        if t.size and (np.any(t <= 0) or not np.all(np.diff(t) > 0)):
            raise ValueError("atom times must be positive and strictly increasing (at most one atom per time)")
        t.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", m)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.marks.tolist()))

    def __len__(self) -> int:
        return self.times.size

    def with_mark(self, i: int, mark: float) -> "MeasureRealization":
        m = self.marks.copy()
        m[i] = mark
        return MeasureRealization(self.times, m)


@dataclass(frozen=True, eq=False)
class CompensatorAtom:
    """Predictable atom ``hat_nu_S(de) = sum_j w_j delta_{e_j}(de)`` at time ``S``."""

    time: float
    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.marks, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if m.shape != w.shape or m.size == 0:
            raise ValueError("atom needs matching, nonempty marks and weights")
        if np.any(w < 0):
            raise ValueError("atom weights must be nonnegative")
        mass = float(w.sum())
        if not (0.0 < mass <= 1.0 + MASS_TOL):
            raise ValueError(f"atom mass must lie in (0, 1], got {mass}")
        object.__setattr__(self, "marks", m)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point(cls, time: float, mark: float, mass: float = 1.0) -> "CompensatorAtom":
        return cls(time, np.array([mark]), np.array([mass]))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_full(self) -> bool:
        return abs(self.mass - 1.0) <= MASS_TOL


@dataclass(frozen=True, eq=False)
class CompensatorSpec:
    """Per-path compensator: rate part plus predictable atoms.

    ``path`` supplies the left limits the rate kernel and fields read; it may
    be omitted for compensators that do not depend on the state (the state
    is then read as 0).
    """

    rate: Optional[MarkKernel] = None
    atoms: tuple[CompensatorAtom, ...] = ()
    total_mass_bound: float = np.inf
    path: Optional[CadlagPath] = None

    def __post_init__(self):
        atoms = tuple(sorted(self.atoms, key=lambda a: a.time))
        times = [a.time for a in atoms]
        if len(set(times)) != len(times):
            raise ValueError("at most one compensator atom per time")
        object.__setattr__(self, "atoms", atoms)
        if self.total_mass_bound <= 0:
            raise ValueError("total_mass_bound must be positive")

    @property
    def atom_times(self) -> np.ndarray:
        return np.array([a.time for a in self.atoms], dtype=float)

    @property
    def atom_masses(self) -> np.ndarray:
        return np.array([a.mass for a in self.atoms], dtype=float)

    def atom_at(self, s: float) -> Optional[CompensatorAtom]:
        for a in self.atoms:
            if abs(a.time - s) <= TIME_TOL * max(1.0, s):
                return a
        return None

    def left_state(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.path is None:
            return np.zeros_like(s)
        return np.atleast_1d(self.path.left_at(s))

    def integration_points(self, grid: Optional[TimeGrid] = None) -> np.ndarray:
        """Points of the left-point rule: the path grid merged with ``grid``."""
        pts = [] if self.path is None else [self.path.grid.points]
        if grid is not None:
            pts.append(grid.points)
        if not pts:
            raise MeasureError("need a grid or a path to integrate the rate part")
        return np.unique(np.concatenate(pts))

    def rate_state(self, points: np.ndarray) -> np.ndarray:
        """State used by the rate part on ``(p_i, p_{i+1}]``: the value at ``p_i``."""
        if self.path is None:
            return np.zeros_like(points)
        return self.path.at(points)

    def check_mass_bound(self, grid: Optional[TimeGrid] = None) -> None:
        if self.rate is None:
            return
        pts = self.integration_points(grid)
        m = self.rate.mass(pts, self.rate_state(pts))
        if np.any(m > self.total_mass_bound * (1 + 1e-12)):
            raise MeasureError(f"rate mass {m.max()} exceeds bound {self.total_mass_bound}")


@dataclass(frozen=True)
class EventSets:
    D: np.ndarray
    J: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        if not np.all(np.isin(self.K, self.J)):
            raise ValueError("K must be a subset of J")


@dataclass(frozen=True, eq=False)
class PredictableField:
    """Random field ``W(s, e, x)`` evaluated with ``x = X_{s-}``; vectorized."""

    fn: Callable
    square_integrable: bool = True
    name: str = ""

    def __call__(self, s, e, x) -> np.ndarray:
        return np.asarray(self.fn(s, e, x), dtype=float)

    @classmethod
    def constant(cls, c: float, name: str = "") -> "PredictableField":
        return cls(lambda s, e, x: np.full(np.broadcast(s, e, x).shape, float(c)), name=name or f"const({c})")

    @classmethod
    def zero(cls) -> "PredictableField":
        return cls.constant(0.0, "zero")

    def __sub__(self, other: "PredictableField") -> "PredictableField":
        return PredictableField(lambda s, e, x: self(s, e, x) - other(s, e, x), self.square_integrable and other.square_integrable)

    def __add__(self, other: "PredictableField") -> "PredictableField":
        return PredictableField(lambda s, e, x: self(s, e, x) + other(s, e, x), self.square_integrable and other.square_integrable)


@dataclass(frozen=True)
class NormEstimate:
    value: float
    stderr: float
    n_paths: int

    def to_record(self, scenario: str, norm_name: str) -> dict:
        return {"scenario": scenario, "norm_name": norm_name, "value": self.value, "stderr": self.stderr, "n_paths": self.n_paths}


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(np.ravel(arr)))
        raise MeasureError(f"{what} is not finite (first offending entry {bad[0]} of {np.size(arr)})")
    return arr


# -- atom-level quantities ---------------------------------------------------


def _atom_values(w: PredictableField, atom: CompensatorAtom, x_left: float) -> np.ndarray:
    return _finite(np.broadcast_to(w(atom.time, atom.marks, x_left), atom.marks.shape).astype(float), "W at a compensator atom")


def hat_w(w: PredictableField, nu: CompensatorSpec, s: float) -> float:
    """``hat W_s = integral W_s(e) hat_nu_s(de)``; zero when ``nu`` has no atom at ``s``."""
    atom = nu.atom_at(s)
    if atom is None:
        return 0.0
    vals = _atom_values(w, atom, float(nu.left_state(atom.time)[0]))
    return float(np.dot(atom.weights, vals))


_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


def _rate_integrand(w: PredictableField, nu: CompensatorSpec, points: np.ndarray, power: int) -> np.ndarray:
    """``integral |W(s, e, x)|^power rate(s, x; de) ds`` over each interval.

    The state is frozen at the left point of the interval (it is constant
    there for pure-jump paths); the time dependence of ``W`` and of the rate
    is integrated by two-point Gauss-Legendre, whose nodes are interior so
    that step-wise fields are read on the correct step.
    """
    if nu.rate is None or points.size < 2:
        return np.zeros(max(points.size - 1, 0))
    a, dt = points[:-1], np.diff(points)
    x = nu.rate_state(a)
    g = np.zeros(a.size)
    for node in _GAUSS2:
        s = a + node * dt
        wts = nu.rate.weights(s, x)
        vals = np.broadcast_to(w(s[:, None], nu.rate.nodes[None, :], x[:, None]), wts.shape)
        _finite(vals, "W on the rate part")
        g = g + 0.5 * np.sum(wts * (vals**power if power != 1 else vals), axis=1)
    return _finite(g * dt, "rate-part integral")


def _cumulate(points: np.ndarray, increments: np.ndarray, events: Sequence[tuple[float, float]], report: np.ndarray) -> np.ndarray:
    """Running sum of interval increments plus point events, read at ``report`` times."""
    cont = np.concatenate([[0.0], np.cumsum(increments)])
    tol = TIME_TOL * max(1.0, points[-1])
    idx = np.searchsorted(points, report + tol, side="right") - 1
    out = cont[np.clip(idx, 0, None)].copy()
    if events:
        et = np.array([t for t, _ in events])
        ev = np.array([v for _, v in events])
        order = np.argsort(et, kind="stable")
        et, ev = et[order], ev[order]
        ce = np.cumsum(ev)
        k = np.searchsorted(et, report + tol, side="right")
        out += np.where(k > 0, ce[np.maximum(k - 1, 0)], 0.0)
    return out


def _report_grid(nu: CompensatorSpec, grid: Optional[TimeGrid], extra: Iterable[float] = ()) -> TimeGrid:
    base = grid if grid is not None else (nu.path.grid if nu.path is not None else None)
    if base is None:
        raise MeasureError("need a grid or a path")
    extra = [t for t in extra if 0 < t <= base.horizon]
    return base.with_points(extra) if extra else base


# -- C(W) --------------------------------------------------------------------


def _c_terms(w: PredictableField, nu: CompensatorSpec, variant: str):
    events = []
    for atom in nu.atoms:
        vals = _atom_values(w, atom, float(nu.left_state(atom.time)[0]))
        what = float(np.dot(atom.weights, vals))
        mass = atom.mass
        if variant == "definition":
            term = float(np.dot(atom.weights, (vals - what) ** 2)) + (1.0 - mass) * what**2
        elif variant == "decomposed":
            term = float(np.dot(atom.weights, vals**2)) - what**2
        elif variant == "restricted":
            # hat W = hat W 1_J, and the second sum only runs over J \ K
            term = float(np.dot(atom.weights, (vals - what) ** 2))
            if not atom.is_full:
                term += (1.0 - mass) * what**2
        else:
            raise ValueError(variant)
        events.append((atom.time, term))
    return events


def c_of_w(w: PredictableField, mu: Optional[MeasureRealization], nu: CompensatorSpec, grid: Optional[TimeGrid] = None, variant: str = "definition") -> CadlagPath:
    """The increasing predictable process ``C(W)`` on ``grid`` (plus atom times).

    ``C(W)_t = |W - hat W|^2 * nu_t + sum_{s<=t} (1 - hat_nu_s(R)) |hat W_s|^2``.
    ``variant="decomposed"`` evaluates ``|W|^2 * nu_t - sum |hat W_s|^2`` and
    ``variant="restricted"`` drops the (vanishing) second sum on ``K``; all
    three agree whenever ``W`` is square integrable.
    """
    if mu is not None and len(mu):
        # the field has to be evaluable on the realized atoms as well
        x = nu.left_state(mu.times)
        _finite(w(mu.times, mu.marks, x), "W at a mu-atom")
    report = _report_grid(nu, grid, nu.atom_times)
    pts = nu.integration_points(report)
    inc = _rate_integrand(w, nu, pts, power=2)
    vals = _cumulate(pts, inc, _c_terms(w, nu, variant), report.points)
    _finite(vals, "C(W)")
    jumps = [(a.time, v) for a, (_, v) in zip(nu.atoms, _c_terms(w, nu, variant)) if v != 0.0 and a.time <= report.horizon]
    cont = vals - _cumulate(report.points, np.zeros(report.steps), jumps, report.points)
    return CadlagPath.from_parts(report, cont, jumps)


def c_of_w_terminal(w: PredictableField, nu: CompensatorSpec, grid: Optional[TimeGrid] = None, variant: str = "definition") -> float:
    report = _report_grid(nu, grid)
    pts = nu.integration_points(report)
    total = float(np.sum(_rate_integrand(w, nu, pts, power=2)))
    total += sum(v for t, v in _c_terms(w, nu, variant) if t <= report.horizon + TIME_TOL)
    if not np.isfinite(total):
        raise MeasureError("C(W)_T diverges")
    return total


def l2_density_terminal(w: PredictableField, nu: CompensatorSpec, grid: Optional[TimeGrid] = None) -> float:
    """``|W|^2 * nu_T`` on one path."""
    report = _report_grid(nu, grid)
    pts = nu.integration_points(report)
    total = float(np.sum(_rate_integrand(w, nu, pts, power=2)))
    for atom in nu.atoms:
        if atom.time <= report.horizon + TIME_TOL:
            vals = _atom_values(w, atom, float(nu.left_state(atom.time)[0]))
            total += float(np.dot(atom.weights, vals**2))
    return total


def _mean_stderr(samples: Sequence[float]) -> NormEstimate:
    a = np.asarray(samples, dtype=float)
    if a.size == 0:
        raise MeasureError("empty ensemble")
    se = float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0
    return NormEstimate(float(a.mean()), se, int(a.size))


def _compensators(ensemble) -> list[CompensatorSpec]:
    return [r if isinstance(r, CompensatorSpec) else r.nu for r in ensemble]


def g2_norm(w: PredictableField, ensemble, grid: Optional[TimeGrid] = None) -> NormEstimate:
    """Monte Carlo ``E[C(W)_T]`` (the squared G^2(mu) norm).

    ``ensemble`` holds forward realizations (anything with a ``nu``) or
    compensators directly.
    """
    return _mean_stderr([c_of_w_terminal(w, nu, grid) for nu in _compensators(ensemble)])


def l2_norm(w: PredictableField, ensemble, grid: Optional[TimeGrid] = None) -> NormEstimate:
    """Monte Carlo ``E[|W|^2 * nu_T]`` (the squared L^2(mu) norm)."""
    return _mean_stderr([l2_density_terminal(w, nu, grid) for nu in _compensators(ensemble)])


# -- compensated integrals ---------------------------------------------------


def _compensated_events(w: PredictableField, mu: MeasureRealization, nu: CompensatorSpec) -> list[tuple[float, float]]:
    events = []
    if len(mu):
        x = nu.left_state(mu.times)
        vals = _finite(np.broadcast_to(w(mu.times, mu.marks, x), mu.times.shape).astype(float), "W at a mu-atom")
        events.extend(zip(mu.times.tolist(), vals.tolist()))
    for atom in nu.atoms:
        what = float(np.dot(atom.weights, _atom_values(w, atom, float(nu.left_state(atom.time)[0]))))
        events.append((atom.time, -what))
    return events


def compensated_values(w: PredictableField, mu: MeasureRealization, nu: CompensatorSpec, times: np.ndarray) -> np.ndarray:
    """``W * (mu - nu)`` read at ``times`` (fast path, no path object)."""
    times = np.asarray(times, dtype=float)
    pts = nu.integration_points(TimeGrid(np.union1d([0.0], times)) if times.size else None)
    inc = _rate_integrand(w, nu, pts, power=1)
    return _cumulate(pts, -inc, _compensated_events(w, mu, nu), times)


def compensated_integral(w: PredictableField, mu: MeasureRealization, nu: CompensatorSpec, grid: Optional[TimeGrid] = None) -> CadlagPath:
    """Path ``t -> int_0^t int W_s(e) (mu - nu)(ds de)``.

    The returned path lives on ``grid`` refined by every atom time of ``mu``
    and ``nu``; it jumps only there.
    """
    events = _compensated_events(w, mu, nu)
    report = _report_grid(nu, grid, [t for t, _ in events])
    pts = nu.integration_points(report)
    inc = _rate_integrand(w, nu, pts, power=1)
    vals = _finite(_cumulate(pts, -inc, events, report.points), "compensated integral")
    merged: dict[float, float] = {}
    for t, v in events:
        if t <= report.horizon + TIME_TOL:
            t = report.snap(t)
            merged[t] = merged.get(t, 0.0) + v
    jumps = [(t, v) for t, v in merged.items() if v != 0.0]
    cont = vals - _cumulate(report.points, np.zeros(report.steps), jumps, report.points)
    return CadlagPath.from_parts(report, cont, jumps)


def compensated_terminal(w: PredictableField, mu: MeasureRealization, nu: CompensatorSpec, horizon: float) -> float:
    return float(compensated_values(w, mu, nu, np.array([horizon]))[0])


# -- event classification ----------------------------------------------------


def classify_events(mu: MeasureRealization, nu: CompensatorSpec) -> EventSets:
    """``D`` (atoms of mu), ``J`` (atoms of nu), ``K`` (full-mass atoms of nu)."""
    masses = nu.atom_masses
    times = nu.atom_times
    J = times[masses > 0]
    K = times[np.abs(masses - 1.0) <= MASS_TOL]
    return EventSets(D=np.asarray(mu.times, dtype=float).copy(), J=J, K=K)


# -- measure transfer identity -----------------------------------------------


def _phi_x(s, x):
    return x


def _phi_x2(s, x):
    return x * x


def _phi_x3(s, x):
    return x * x * x


def _phi_sx(s, x):
    return (1.0 + s) * x


def _phi_pos(s, x):
    return np.where(x > 0, x, 0.0)


def _phi_sin(s, x):
    return np.sin(x) * np.cos(s)


def _phi_capped(s, x):
    return np.minimum(np.abs(x), 1.0)


TEST_FUNCTIONS: tuple[Callable, ...] = (_phi_x, _phi_x2, _phi_x3, _phi_sx, _phi_pos, _phi_sin, _phi_capped)
# polynomial members: exact in binary floating point on dyadic data
POLYNOMIAL_TEST_FUNCTIONS: tuple[Callable, ...] = (_phi_x, _phi_x2, _phi_x3, _phi_sx, _phi_pos)


@dataclass(frozen=True)
class TransferReport:
    lhs: np.ndarray
    rhs: np.ndarray
    boundary_term: np.ndarray

    @property
    def max_abs_diff(self) -> float:
        return float(np.max(np.abs(self.lhs - self.rhs))) if self.lhs.size else 0.0


def transfer_identity_check(
    phi_family: Optional[Sequence[Callable]],
    x_path: CadlagPath,
    mu: MeasureRealization,
    gamma_tilde: PredictableField,
    xp_jumps: Sequence[tuple[float, float]] = (),
) -> TransferReport:
    """Compare ``int phi dmu^X`` with ``int phi(s, gamma~(s, e)) mu(ds de) + V^phi``.

    ``V^phi = sum phi(s, Delta X^p_s)`` over the jumps of the predictable part.
    Every ``phi`` must vanish at ``x = 0``.
    """
    family = tuple(phi_family) if phi_family else TEST_FUNCTIONS
    jt, js = x_path.jump_times, x_path.jump_sizes
    if len(mu):
        x_left = x_path.left_at(mu.times)
        g = np.broadcast_to(gamma_tilde(mu.times, mu.marks, x_left), mu.times.shape)
    else:
        g = np.empty(0)
    xpt = np.array([t for t, _ in xp_jumps], dtype=float)
    xps = np.array([v for _, v in xp_jumps], dtype=float)
    lhs, rhs, bnd = [], [], []
    for phi in family:
        if np.any(np.asarray(phi(np.array([0.0, 1.0]), np.zeros(2))) != 0):
            raise ValueError("test functions must satisfy phi(s, 0) = 0")
        lhs.append(float(np.sum(phi(jt, js))) if jt.size else 0.0)
        v = float(np.sum(phi(xpt, xps))) if xpt.size else 0.0
        rhs.append((float(np.sum(phi(mu.times, g))) if len(mu) else 0.0) + v)
        bnd.append(v)
    return TransferReport(np.array(lhs), np.array(rhs), np.array(bnd))
