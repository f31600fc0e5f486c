"""Reference solutions that share no numerical kernels with the solvers they check.

* finite-state value functions by matrix exponential, with a separate RK4
  cross-check;
* a Crank-Nicolson solver for the one-dimensional Kolmogorov backward PDE;
* the deterministic PDMP value function (no interior jumps) by ODE events;
* exhaustive enumeration of small dyadic event configurations, on which the
  pathwise identities hold exactly in floating point.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm, solve_banded
from scipy.optimize import brentq

ROW_SUM_TOL = 1e-12


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    q: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        st = np.asarray(self.states, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] != st.size:
            raise OracleError("q must be square with one state per row")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise OracleError("off-diagonal rates must be nonnegative")
        if np.any(np.abs(q.sum(axis=1)) >= ROW_SUM_TOL * max(1.0, np.abs(q).max())):
            raise OracleError("generator rows must sum to 0")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "states", st)

    @property
    def n(self) -> int:
        return self.states.size


def matrix_exponential_v(q: GeneratorMatrix, g, t: float, T: float) -> np.ndarray:
    """``v(t, .) = exp(Q (T - t)) g`` (scipy's scaling-and-squaring Pade 13)."""
    if T < t:
        raise OracleError("need t <= T")
    P = expm(q.q * (T - t))
    if np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOL * 10 * q.n) or np.any(P < -ROW_SUM_TOL):
        raise OracleError("transition matrix is not stochastic to working precision")
    return P @ np.asarray(g, dtype=float)


def linear_driver_v(q: GeneratorMatrix, g, tau: float, c0: float = 0.0, cx: float = 0.0, a: float = 0.0, cu: float = 0.0) -> np.ndarray:
    """Value function for ``f = c0 + cx x + a y + cu Gamma`` (``Gamma`` with ``rho = 1``).

    ``-dv/dt = c + L v`` with ``L = a I + (1 + cu) Q`` and ``c = c0 + cx x``,
    solved through the exponential of the augmented matrix ``[[L, c], [0, 0]]``.
    """
    n = q.n
    L = a * np.eye(n) + (1.0 + cu) * q.q
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = L
    aug[:n, n] = c0 + cx * q.states
    E = expm(aug * tau)
    return E[:n, :n] @ np.asarray(g, dtype=float) + E[:n, n]


def rk4_backward_v(q: GeneratorMatrix, g, t: float, T: float, steps: int = 1000, a: float = 0.0, cu: float = 0.0, c0: float = 0.0, cx: float = 0.0) -> np.ndarray:
    """Independent RK4 for ``dv/ds = -(c + L v)`` from ``s = T`` down to ``s = t``."""
    n = q.n
    L = a * np.eye(n) + (1.0 + cu) * q.q
    c = c0 + cx * q.states
    v = np.asarray(g, dtype=float).copy()
    h = (T - t) / steps
    rhs = lambda v: c + L @ v  # noqa: E731  (dv/d(tau))
    for _ in range(steps):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * h * k1)
        k3 = rhs(v + 0.5 * h * k2)
        k4 = rhs(v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return v


class FiniteStateValue:
    """``v(t, x)`` for a finite chain, evaluable at arbitrary times.

    ``v`` is tabulated by the augmented matrix exponential on ``nodes + 1``
    times and interpolated by cubic Hermite using the exact time derivative
    ``-(c + L v)``; the interpolation error is of order ``(T / nodes)^4``.
    """

    def __init__(self, q: GeneratorMatrix, g, T: float, nodes: int = 1024, **linear):
        self.q, self.T = q, float(T)
        self.times = np.linspace(0.0, self.T, nodes + 1)
        self.table = finite_state_table(q, g, self.T, self.times, **linear)
        L = linear.get("a", 0.0) * np.eye(q.n) + (1.0 + linear.get("cu", 0.0)) * q.q
        c = linear.get("c0", 0.0) + linear.get("cx", 0.0) * q.states
        self.deriv = -(c[None, :] + self.table @ L.T)

    def state_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(self.q.states, x), 0, self.q.n - 1)
        j = np.clip(i - 1, 0, self.q.n - 1)
        i = np.where(np.abs(self.q.states[j] - x) < np.abs(self.q.states[i] - x), j, i)
        if np.any(np.abs(self.q.states[i] - x) > 1e-9):
            raise OracleError("state outside the chain's state space")
        return i

    def __call__(self, t, x) -> np.ndarray:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if not np.all(np.diff(self.q.states) > 0):
            raise OracleError("states must be sorted for lookup")
        i = self.state_index(x)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        h = self.times[k + 1] - self.times[k]
        u = (t - self.times[k]) / h
        h00, h10 = 2 * u**3 - 3 * u**2 + 1, u**3 - 2 * u**2 + u
        h01, h11 = -2 * u**3 + 3 * u**2, u**3 - u**2
        return (h00 * self.table[k, i] + h10 * h * self.deriv[k, i]
                + h01 * self.table[k + 1, i] + h11 * h * self.deriv[k + 1, i])


def finite_state_table(q: GeneratorMatrix, g, T: float, times: Sequence[float], **linear) -> np.ndarray:
    """``v(t_j, x_i)`` for every requested time, shape ``(len(times), n)``."""
    return np.stack([linear_driver_v(q, g, T - float(t), **linear) for t in times])


# -- Crank-Nicolson ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PdeTable:
    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, t, x) -> np.ndarray:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        return self._interp(self.values, t, x)

    def dv_dx(self, t, x) -> np.ndarray:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        return self._interp(np.gradient(self.values, self.xs, axis=1), t, x)

    def _interp(self, table, t, x):
        j = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        wt = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        i = np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.xs.size - 2)
        wx = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i])
        v0 = (1 - wx) * table[j, i] + wx * table[j, i + 1]
        v1 = (1 - wx) * table[j + 1, i] + wx * table[j + 1, i + 1]
        return (1 - wt) * v0 + wt * v1


def pde_reference_v(b: Callable, sigma: Callable, g: Callable, lower: float, upper: float, nx: int, T: float, nt: int, rannacher: int = 2) -> PdeTable:
    """Crank-Nicolson for ``v_t + b v_x + sigma^2 v_xx / 2 = 0``, ``v(T) = g``.

    Boundary handling: Dirichlet values ``v = g`` at ``lower`` and ``upper``;
    the domain must be wide enough that the solution is frozen there. The
    first ``rannacher`` steps are split into two implicit Euler half steps to
    damp the oscillations of non-smooth terminal data.
    """
    xs = np.linspace(lower, upper, nx + 1)
    dx = xs[1] - xs[0]
    times = np.linspace(0.0, T, nt + 1)
    dt = T / nt
    xi = xs[1:-1]
    bb = np.asarray(b(xi), dtype=float) * np.ones_like(xi)
    a2 = 0.5 * np.asarray(sigma(xi), dtype=float) ** 2 * np.ones_like(xi)
    # operator L v_i = lo v_{i-1} + di v_i + up v_{i+1}
    lo = a2 / dx**2 - bb / (2 * dx)
    di = -2 * a2 / dx**2
    up = a2 / dx**2 + bb / (2 * dx)
    vals = np.empty((nt + 1, nx + 1))
    v = np.asarray(g(xs), dtype=float) * np.ones_like(xs)
    vals[-1] = v
    g_lo, g_hi = v[0], v[-1]
    if np.any(lo < 0) or np.any(up < 0):
        warnings.warn("central differencing loses monotonicity: refine dx (cell Peclet number > 1)", stacklevel=2)

    def step(v, h, theta):
        # (I - theta h L) v_new = (I + (1 - theta) h L) v_old, backward in time
        rhs = v[1:-1] + (1 - theta) * h * (lo * v[:-2] + di * v[1:-1] + up * v[2:])
        rhs[0] += theta * h * lo[0] * g_lo
        rhs[-1] += theta * h * up[-1] * g_hi
        ab = np.zeros((3, xi.size))
        ab[0, 1:] = -theta * h * up[:-1]
        ab[1] = 1 - theta * h * di
        ab[2, :-1] = -theta * h * lo[1:]
        out = v.copy()
        out[1:-1] = solve_banded((1, 1), ab, rhs)
        out[0], out[-1] = g_lo, g_hi
        return out

    for j in range(nt, 0, -1):
        if nt - j < rannacher:
            v = step(step(v, dt / 2, 1.0), dt / 2, 1.0)
        else:
            v = step(v, dt, 0.5)
        vals[j - 1] = v
    gmin, gmax = float(np.min(vals[-1])), float(np.max(vals[-1]))
    overshoot = float(max(0.0, np.max(vals) - gmax, gmin - np.min(vals)))
    diag = {"max_principle_violation": overshoot, "dx": dx, "dt": dt}
    if overshoot > 1e-6 * max(1.0, gmax - gmin):
        warnings.warn(f"Crank-Nicolson solution leaves the range of g by {overshoot:.3g}", stacklevel=2)
    return PdeTable(times, xs, vals, diag)


def gaussian_heat_v(t, x, T: float, s0: float = 1.0) -> np.ndarray:
    """``E[g(x + W_{T-t})]`` for ``g(x) = exp(-x^2 / (2 s0^2))``."""
    tau = T - np.asarray(t, dtype=float)
    s2 = s0**2 + tau
    return s0 / np.sqrt(s2) * np.exp(-np.asarray(x, dtype=float) ** 2 / (2 * s2))


# -- deterministic PDMP ------------------------------------------------------


def pdmp_deterministic_v(h: Callable, beta: Callable, g: Callable, T: float, f: Optional[Callable] = None, horizon_guard: float = 1e-9) -> Callable:
    """``v(t, x)`` for a PDMP on ``[0, 1]`` without interior jumps.

    The trajectory from ``(t, x)`` follows ``x' = h(x)`` and restarts at
    ``beta(b)`` whenever it reaches a boundary point ``b``. The driver
    ``f(s, x, y)`` acts with clock ``ds`` plus one unit at each boundary hit;
    at a hit the pre-jump value solves ``y_- = y_+ + f(S, b, y_-)``.
    """
    f = f if f is not None else (lambda s, x, y: 0.0)

    def trajectory(t0, x0):
        segs, hits = [], []
        t, x = t0, x0

        def up(s, y):
            return y[0] - 1.0

        def down(s, y):
            return y[0]

        up.terminal = down.terminal = True
        up.direction, down.direction = 1, -1
        while t < T:
            sol = solve_ivp(lambda s, y: [h(y[0])], (t, T), [x], events=(up, down), dense_output=True, rtol=1e-12, atol=1e-14)
            if sol.status == 1:
                te = [ev for ev in sol.t_events if ev.size]
                s = float(min(ev[0] for ev in te))
                bpt = 1.0 if sol.t_events[0].size and sol.t_events[0][0] == s else 0.0
                if s >= T * (1 - horizon_guard):
                    segs.append((t, T, sol.sol))
                    break
                segs.append((t, s, sol.sol))
                hits.append((s, bpt))
                t, x = s, float(beta(bpt))
            else:
                segs.append((t, T, sol.sol))
                break
        return segs, hits

    @functools.lru_cache(maxsize=65536)
    def value(t0, x0) -> float:
        segs, hits = trajectory(float(t0), float(x0))
        xT = float(segs[-1][2](segs[-1][1])[0]) if segs else float(x0)
        y = float(g(xT))
        for k in range(len(segs) - 1, -1, -1):
            a, bnd, path = segs[k]
            if bnd > a:
                sol = solve_ivp(lambda s, yy: [-float(f(s, path(s)[0], yy[0]))], (bnd, a), [y], rtol=1e-12, atol=1e-14)
                y = float(sol.y[0, -1])
            if k > 0:
                s, bpt = hits[k - 1]
                y_plus = y
                fun = lambda ym: ym - y_plus - float(f(s, bpt, ym))  # noqa: E731
                lo, hi = y_plus - 1.0, y_plus + 1.0
                while fun(lo) * fun(hi) > 0:
                    lo, hi = lo - 2 * (hi - lo), hi + 2 * (hi - lo)
                y = brentq(fun, lo, hi, xtol=1e-14)
        return y

    def v(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        out = np.array([value(float(tt), float(xx)) for tt, xx in zip(t.ravel(), x.ravel())])
        return out.reshape(t.shape)

    return v


# -- exhaustive enumeration --------------------------------------------------


@dataclass(frozen=True)
class SmallCase:
    """One enumerated configuration: events ``(time, kind, value)``.

    ``kind`` is ``"interior"`` (value = post-jump mark) or ``"boundary"``
    (value = the boundary point reached; the restart is ``beta``).
    """

    events: tuple
    x0: float = 0.5
    beta: float = 0.5

    def states(self) -> list[tuple[float, float, float]]:
        """``(time, left state, right state)`` per event, for a piecewise-constant path."""
        x = self.x0
        out = []
        for t, kind, val in self.events:
            left = x if kind == "interior" else val
            right = val if kind == "interior" else self.beta
            out.append((t, left, right))
            x = right
        return out


def enumerate_cases(max_events: int = 3, times=(0.25, 0.5, 0.75), marks=(0.25, 0.75), boundary=True) -> list[SmallCase]:
    kinds = [("interior", m) for m in marks]
    if boundary:
        kinds += [("boundary", 0.0), ("boundary", 1.0)]
    cases = []
    for n in range(max_events + 1):
        for ts in itertools.combinations(times, n):
            for ks in itertools.product(kinds, repeat=n):
                cases.append(SmallCase(tuple((t, k, v) for t, (k, v) in zip(ts, ks))))
    return cases


@dataclass
class ExhaustiveReport:
    n_cases: int
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def _case_objects(case: SmallCase, horizon: float = 1.0, steps: int = 8):
    """Path, measure, compensator atoms and X^p jumps for a case (built from scratch)."""
    from .measure import CompensatorAtom, CompensatorSpec, MeasureRealization
    from .paths import CadlagPath, TimeGrid

    grid = TimeGrid(np.linspace(0.0, horizon, steps + 1))
    vals = np.full(steps + 1, case.x0)
    jt, js, mt, mm, atoms, xp = [], [], [], [], [], []
    for t, left, right in case.states():
        i = grid.index(t)
        vals[i:] = right
        if right != left:
            jt.append(t)
            js.append(right - left)
        mt.append(t)
        mm.append(right)
    for (t, kind, val) in case.events:
        if kind == "boundary":
            atoms.append(CompensatorAtom.point(t, case.beta, 1.0))
            xp.append((t, case.beta - val))
    # between events the path is recorded only through its jump table: the left
    # limit at an event is value - jump, which is the boundary point for hits
    path = CadlagPath(grid, vals, np.array(jt), np.array(js))
    mu = MeasureRealization(np.array(mt), np.array(mm))
    return path, mu, atoms, xp, grid


def _poly_family():
    return (
        lambda s, x: x,
        lambda s, x: x * x,
        lambda s, x: x * x * x,
        lambda s, x: (1.0 + s) * x,
        lambda s, x: np.where(x > 0, x, 0.0),
    )


def _check_transfer(case: SmallCase) -> Optional[dict]:
    from .forward import pdmp_gamma_tilde
    from .measure import transfer_identity_check

    path, mu, atoms, xp, _ = _case_objects(case)
    rep = transfer_identity_check(_poly_family(), path, mu, pdmp_gamma_tilde(), xp)
    # the boundary term recomputed from the case description alone
    vb = np.array([sum(float(phi(t, case.beta - val)) for t, kind, val in case.events if kind == "boundary") for phi in _poly_family()])
    if not (np.array_equal(rep.lhs, rep.rhs) and np.array_equal(rep.boundary_term, vb)):
        return {"events": case.events, "lhs": rep.lhs.tolist(), "rhs": rep.rhs.tolist()}
    return None


TELESCOPE_RATE = ((0.25, 0.5), (0.75, 0.25))  # (mark, rate)
TELESCOPE_ATOM = (0.5, ((0.25, 0.25), (0.75, 0.25)))  # half-mass atom: time, (mark, weight)


def _telescope_w(s, e, x):
    return e + x * e


def _check_telescoping(case: SmallCase) -> Optional[dict]:
    from .kernels import MarkKernel
    from .measure import CompensatorAtom, CompensatorSpec, PredictableField, compensated_terminal

    path, mu, _, _, grid = _case_objects(case)
    rate = MarkKernel.discrete([m for m, _ in TELESCOPE_RATE], [r for _, r in TELESCOPE_RATE])
    t_a, pts = TELESCOPE_ATOM
    atom = CompensatorAtom(t_a, np.array([m for m, _ in pts]), np.array([w for _, w in pts]))
    nu = CompensatorSpec(rate=rate, atoms=(atom,), path=path)
    got = compensated_terminal(PredictableField(_telescope_w), mu, nu, grid.horizon)
    # independent evaluation over the constant pieces of the path
    total = sum(_telescope_w(t, right, left) for t, left, right in case.states())
    knots = [0.0] + [t for t, _, _ in case.states()] + [grid.horizon]
    levels = [case.x0] + [right for _, _, right in case.states()]
    for (a, b), x in zip(zip(knots[:-1], knots[1:]), levels):
        total -= (b - a) * sum(r * _telescope_w(0.0, m, x) for m, r in TELESCOPE_RATE)
    x_at = case.x0
    for t, left, right in case.states():
        if t < t_a:
            x_at = right
        elif t == t_a:
            x_at = left
    total -= sum(w * _telescope_w(t_a, m, x_at) for m, w in pts)
    if got != total:
        return {"events": case.events, "got": got, "expected": total}
    return None


def exhaustive_small_path_check(op="transfer", max_events: int = 3, **lattice) -> ExhaustiveReport:
    """Run an exact pathwise identity over every configuration with at most ``max_events`` events.

    ``op`` is ``"transfer"`` (interior and boundary events), ``"telescoping"``
    (interior events only) or a callable ``SmallCase -> failure dict | None``.
    """
    if max_events > 3:
        raise OracleError("enumeration is capped at three events")
    if op == "transfer":
        fn, boundary = _check_transfer, True
    elif op == "telescoping":
        fn, boundary = _check_telescoping, False
    elif callable(op):
        fn, boundary = op, lattice.pop("boundary", True)
    else:
        raise ValueError(f"unknown op {op!r}")
    cases = enumerate_cases(max_events, boundary=boundary, **lattice)
    failures = [f for f in (fn(c) for c in cases) if f is not None]
    return ExhaustiveReport(len(cases), failures)


# -- cache -------------------------------------------------------------------


def scenario_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class OracleCache:
    """JSON files keyed by the hash of a canonical scenario description."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path(self, key_obj) -> Path:
        return self.directory / f"{scenario_hash(key_obj)[:32]}.json"

    def get_or_compute(self, key_obj, compute: Callable[[], dict]) -> dict:
        p = self.path(key_obj)
        if p.exists():
            with open(p) as fh:
                return json.load(fh)
        value = compute()
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(value, fh, sort_keys=True)
        tmp.replace(p)
        return value
