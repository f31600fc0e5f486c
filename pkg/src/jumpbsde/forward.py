"""Forward simulators: jump-diffusion, pure-jump Markov process and PDMP on [0, 1].

Each simulator is a pure map ``(spec, grid, seed) -> ForwardRealization``. A
realization carries the path of ``X``, the driving measure ``mu``, its
compensator ``nu`` (attached to the path so that rates read ``X_{s-}``), the
field ``gamma~`` mapping marks to jumps of ``X``, and model-specific extras.

Event times are exact and are inserted into the path's own grid; the base
grid is always contained in it.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _rng
from .kernels import MarkKernel
from .measure import CompensatorAtom, CompensatorSpec, MeasureRealization, PredictableField, compensated_integral
from .paths import TIME_TOL, CadlagPath, PathEnsemble, TimeGrid

# events this close to the horizon (relative) are not simulated
HORIZON_GUARD = 1e-9
BOUNDARY_TOL = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ForwardRealization:
    path: CadlagPath
    mu: MeasureRealization
    nu: CompensatorSpec
    gamma_tilde: PredictableField
    aux: dict = field(default_factory=dict)
    model: str = ""
    seed: int = 0

    @property
    def tags(self) -> list[str]:
        return self.aux.get("tags", ["interior"] * len(self.mu))

    @property
    def xp_jumps(self) -> list[tuple[float, float]]:
        """Jumps of the predictable part ``X^p`` as recorded by the simulator."""
        return list(self.aux.get("xp_jumps", []))


@dataclass(frozen=True, eq=False)
class ForwardEnsemble:
    """Realizations on a shared base grid, in path-index order."""

    grid: TimeGrid
    realizations: tuple[ForwardRealization, ...]

    def __len__(self):
        return len(self.realizations)

    def __iter__(self):
        return iter(self.realizations)

    def __getitem__(self, i):
        return self.realizations[i]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(r.seed for r in self.realizations)

    def paths(self) -> PathEnsemble:
        return PathEnsemble(self.grid, tuple(r.path for r in self.realizations), self.seeds)

    def values(self) -> np.ndarray:
        return self.paths().values()


# -- Brownian noise ----------------------------------------------------------


def brownian_path(grid: TimeGrid, rng: np.random.Generator) -> np.ndarray:
    """Brownian values on ``grid`` built by recursive bridging over index ranges.

    The terminal value is drawn first, then midpoints breadth first. For
    uniform grids with ``2^m`` steps the coarse levels of a finer grid reuse
    the same draws, which couples Euler schemes across halvings.
    """
    t = grid.points
    n = grid.steps
    w = np.zeros(n + 1)
    w[n] = np.sqrt(t[n]) * rng.standard_normal()
    lo = np.array([0])
    hi = np.array([n])
    while True:
        keep = hi - lo >= 2
        lo, hi = lo[keep], hi[keep]
        if lo.size == 0:
            break
        mid = (lo + hi) // 2
        ta, tb, tm = t[lo], t[hi], t[mid]
        mean = w[lo] + (tm - ta) / (tb - ta) * (w[hi] - w[lo])
        sd = np.sqrt((tm - ta) * (tb - tm) / (tb - ta))
        w[mid] = mean + sd * rng.standard_normal(mid.size)
        lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])
        order = np.argsort(lo, kind="stable")
        lo, hi = lo[order], hi[order]
    return w


def _bridge_insert(base_t: np.ndarray, base_w: np.ndarray, times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brownian values at extra ``times`` conditional on the base path."""
    out = np.empty(times.size)
    tol = TIME_TOL * max(1.0, base_t[-1])
    for i, s in enumerate(times):
        k = int(np.searchsorted(base_t, s - tol, side="right")) - 1
        if abs(base_t[min(k + 1, base_t.size - 1)] - s) <= tol:
            out[i] = base_w[k + 1]
            continue
        a, wa = base_t[k], base_w[k]
        if i > 0 and times[i - 1] > a:
            a, wa = times[i - 1], out[i - 1]
        b, wb = base_t[k + 1], base_w[k + 1]
        mean = wa + (s - a) / (b - a) * (wb - wa)
        out[i] = mean + np.sqrt((s - a) * (b - s) / (b - a)) * rng.standard_normal()
    return out


def euler_maruyama(b: Callable, sigma: Callable, x0: float, grid: TimeGrid, seed: int) -> CadlagPath:
    """Plain Euler-Maruyama with the Brownian draws of :func:`simulate_jump_diffusion`."""
    w = brownian_path(grid, _rng.stream(seed, _rng.BROWNIAN))
    dw = np.diff(w)
    h = grid.increments
    x = np.empty(len(grid))
    x[0] = x0
    for k in range(grid.steps):
        x[k + 1] = x[k] + (float(b(x[k])) * h[k] + float(sigma(x[k])) * dw[k])
    return CadlagPath(grid, x)


# -- jump-diffusion ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JumpDiffusionSpec:
    """``dX = b(X)ds + sigma(X)dW + int gamma(X_{s-}, e)(mu - nu)(ds de)``, ``nu = levy(de) ds``.

    ``gamma=None`` or ``levy=None`` switches the jump part off entirely.
    """

    b: Callable
    sigma: Callable
    gamma: Optional[Callable] = None
    levy: Optional[MarkKernel] = None
    x0: float = 0.0
    lipschitz_K: float = np.inf
    truncation: float = 0.0

    @property
    def has_jumps(self) -> bool:
        return self.gamma is not None and self.levy is not None

    def effective_levy(self) -> tuple[Optional[MarkKernel], dict]:
        if self.levy is None:
            return None, {}
        return self.levy.truncated(self.truncation)

    def total_rate(self) -> float:
        lev, _ = self.effective_levy()
        return 0.0 if lev is None else float(lev.mass(0.0, 0.0)[0])

    def check(self, n_probe: int = 64, seed: int = 0) -> None:
        """Spot-check the growth and Lipschitz bounds of ``gamma`` and the activity bound."""
        if not self.has_jumps:
            return
        lev, _ = self.effective_levy()
        if lev.scale is not None:
            raise ValueError("the Levy measure of a jump-diffusion cannot depend on (s, x)")
        e = lev.nodes
        if float(np.dot(lev.base_weights, np.minimum(1.0, e * e))) == np.inf:
            raise ValueError("Levy measure does not integrate 1 ^ e^2")
        rng = np.random.default_rng(seed)
        x1 = rng.uniform(-10, 10, n_probe)
        x2 = rng.uniform(-10, 10, n_probe)
        cap = np.minimum(1.0, np.abs(e))[None, :]
        g1 = np.broadcast_to(self.gamma(x1[:, None], e[None, :]), (n_probe, e.size))
        g2 = np.broadcast_to(self.gamma(x2[:, None], e[None, :]), (n_probe, e.size))
        slack = 1e-12
        if np.any(np.abs(g1) > self.lipschitz_K * cap + slack):
            raise ValueError("gamma violates |gamma(x,e)| <= K (1 ^ |e|)")
        lip = self.lipschitz_K * np.abs(x1 - x2)[:, None] * cap
        if np.any(np.abs(g1 - g2) > lip + slack):
            raise ValueError("gamma violates the Lipschitz bound in x")


def simulate_jump_diffusion(spec: JumpDiffusionSpec, grid: TimeGrid, seed: int) -> ForwardRealization:
    levy, trunc_info = spec.effective_levy()
    rate = spec.total_rate() if spec.has_jumps else 0.0
    T = grid.horizon
    if rate * float(grid.increments.max()) >= 0.1:
        warnings.warn(f"coarse grid for the jump activity: rate * dt = {rate * grid.increments.max():.3g}", stacklevel=2)

    base_w = brownian_path(grid, _rng.stream(seed, _rng.BROWNIAN))

    # exact Poisson atoms of the driving measure
    times: list[float] = []
    marks: list[float] = []
    if rate > 0:
        rj = _rng.stream(seed, _rng.JUMPS)
        rm = _rng.stream(seed, _rng.MARKS)
        t = rj.exponential(1.0 / rate)
        while t < T * (1 - HORIZON_GUARD):
            times.append(grid.snap(t))
            marks.append(levy.sample(rm, t, 0.0))
            t += rj.exponential(1.0 / rate)
    mu = MeasureRealization(np.array(times), np.array(marks))

    fine = grid.with_points(times) if times else grid
    if fine is grid:
        w = base_w
    else:
        extra = np.setdiff1d(fine.points, grid.points)
        w_extra = _bridge_insert(grid.points, base_w, extra, _rng.stream(seed, _rng.BRIDGE))
        w = np.empty(len(fine))
        pos = np.searchsorted(fine.points, grid.points)
        w[pos] = base_w
        w[np.searchsorted(fine.points, extra)] = w_extra
    dw = np.diff(w)
    h = fine.increments

    # compensator drift int gamma(x, e) levy(de), evaluated by quadrature
    def comp(x: float) -> float:
        return float(np.dot(levy.base_weights, np.broadcast_to(spec.gamma(x, levy.nodes), levy.nodes.shape)))

    atom_at = {fine.index(s): (s, e) for s, e in zip(times, marks)}
    x = np.empty(len(fine))
    xp = np.empty(len(fine))
    dxc = np.empty(fine.steps)
    x[0] = xp[0] = spec.x0
    jumps = []
    for k in range(fine.steps):
        xk = x[k]
        sig = float(spec.sigma(xk))
        dxc[k] = sig * dw[k]
        cont = float(spec.b(xk)) * h[k] + dxc[k]
        if spec.has_jumps:
            left = xk + cont - h[k] * comp(xk)
        else:
            left = xk + cont
        xp[k + 1] = xp[k] + cont
        if k + 1 in atom_at:
            s, e = atom_at[k + 1]
            dj = float(spec.gamma(left, e))
            x[k + 1] = left + dj
            if dj != 0.0:
                jumps.append((s, dj))
        else:
            x[k + 1] = left
        if not np.isfinite(x[k + 1]):
            raise SimulationError(f"state became non-finite at t={fine.points[k + 1]}")

    path = CadlagPath(fine, x, np.array([j[0] for j in jumps]), np.array([j[1] for j in jumps]))
    nu = CompensatorSpec(rate=levy, atoms=(), path=path)
    gamma = spec.gamma
    gt = PredictableField((lambda s, e, x: gamma(x, e)) if gamma is not None else (lambda s, e, x: np.zeros(np.broadcast(s, e, x).shape)), name="gamma")
    aux = {
        "dW": np.diff(base_w),
        "W": base_w,
        "dxc": dxc,
        "xp": CadlagPath(fine, xp),
        "xp_jumps": [],
        "tags": ["interior"] * len(mu),
        "truncation": trunc_info,
    }
    return ForwardRealization(path, mu, nu, gt, aux, "jump_diffusion", seed)


# -- pure-jump Markov process ------------------------------------------------


def generator_kernel(states: Sequence[float], q) -> MarkKernel:
    """Rate kernel ``lambda(x, de) = sum_{j != i(x)} q_{i(x) j} delta_{states_j}``."""
    states = np.asarray(states, dtype=float)
    q = np.asarray(q, dtype=float)
    off = q.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0):
        raise ValueError("generator off-diagonals must be nonnegative")

    def scale(s, x):
        idx = state_index(states, x)
        return off[idx]

    return MarkKernel.discrete(states, np.ones(states.size)).scaled(scale)


def state_index(states: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    idx = np.abs(np.asarray(states)[None, :] - x.reshape(-1, 1)).argmin(axis=1)
    return idx.reshape(x.shape) if x.ndim else idx


@dataclass(frozen=True, eq=False)
class PureJumpSpec:
    """Pure-jump process with transition rate measure ``lambda(t, x, de)``; marks are post-jump states."""

    rate_kernel: MarkKernel
    rate_bound: float
    x0: float
    state_space: Optional[tuple[float, ...]] = None
    generator: Optional[np.ndarray] = None

    @classmethod
    def from_generator(cls, states: Sequence[float], q, x0: float) -> "PureJumpSpec":
        q = np.asarray(q, dtype=float)
        off = q - np.diag(np.diag(q))
        bound = float(off.sum(axis=1).max())
        return cls(generator_kernel(states, q), bound, float(x0), tuple(float(s) for s in states), q)


def simulate_pure_jump(spec: PureJumpSpec, grid: TimeGrid, seed: int) -> ForwardRealization:
    T = grid.horizon
    kern = spec.rate_kernel
    if spec.rate_bound <= 0:
        if np.any(kern.base_weights > 0) and np.any(kern.mass(np.linspace(0, T, 5), np.full(5, spec.x0)) > 0):
            raise ValueError("rate_bound is zero but the rate kernel is not")
    rj = _rng.stream(seed, _rng.JUMPS)
    rm = _rng.stream(seed, _rng.MARKS)
    x = float(spec.x0)
    times, marks, events = [], [], []
    if spec.rate_bound > 0:
        t = rj.exponential(1.0 / spec.rate_bound)
        while t < T * (1 - HORIZON_GUARD):
            w = kern.weights(t, x)[0]
            total = float(w.sum())
            if total > spec.rate_bound * (1 + 1e-12):
                raise SimulationError(f"rate {total} exceeds rate_bound {spec.rate_bound} at t={t}, x={x}")
            if rj.uniform() * spec.rate_bound < total:
                e = float(kern.nodes[rm.choice(w.size, p=w / total)]) if kern.is_discrete else kern.sample(rm, t, x)
                s = grid.snap(t)
                times.append(s)
                marks.append(e)
                events.append((s, x, e))
                x = e
            t += rj.exponential(1.0 / spec.rate_bound)
    fine = grid.with_points(times) if times else grid
    vals = np.full(len(fine), float(spec.x0))
    jumps = []
    for s, pre, post in events:
        vals[fine.index(s):] = post
        if post != pre:
            jumps.append((s, post - pre))
    path = CadlagPath(fine, vals, np.array([j[0] for j in jumps]), np.array([j[1] for j in jumps]))
    mu = MeasureRealization(np.array(times), np.array(marks))
    nu = CompensatorSpec(rate=kern, atoms=(), total_mass_bound=max(spec.rate_bound, 1e-300), path=path)
    gt = PredictableField(lambda s, e, x: np.asarray(e, dtype=float) - x, name="e - x")
    aux = {"events": events, "xp_jumps": [], "tags": ["interior"] * len(mu)}
    return ForwardRealization(path, mu, nu, gt, aux, "pure_jump", seed)


# -- PDMP on [0, 1] ----------------------------------------------------------


def rk4_step(f: Callable, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_flow(h: Callable, x0: float, t: float, steps: int) -> float:
    """Flow ``Phi(t, x0)`` of ``g' = h(g)`` with ``steps`` RK4 steps."""
    y = np.array([float(x0)])
    dt = t / steps
    f = lambda y: np.array([float(h(y[0]))])  # noqa: E731
    for _ in range(steps):
        y = rk4_step(f, y, dt)
    return float(y[0])


@dataclass(frozen=True, eq=False)
class PdmpSpec:
    """PDMP on ``[0, 1]`` with flow ``h``, jump rate ``lam``, interior kernel ``P`` and boundary map ``beta``.

    ``P`` is a probability kernel (possibly state-dependent via its scale);
    ``beta`` maps each boundary point to a restart point in ``(0, 1)``.
    """

    h: Callable
    lam: Callable
    beta: Callable
    x0: float
    P: Optional[MarkKernel] = None
    lam_bound: float = 0.0
    substeps: int = 1

    def __post_init__(self):
        if not 0.0 < self.x0 < 1.0:
            raise ValueError("x0 must lie in the open interval (0, 1)")
        for xb in (0.0, 1.0):
            bb = float(self.beta(xb))
            if not 0.0 < bb < 1.0:
                raise ValueError(f"beta({xb}) = {bb} is not in (0, 1)")
        if self.P is None and self.lam_bound > 0:
            raise ValueError("positive jump rate needs an interior kernel P")

    def rate_kernel(self) -> Optional[MarkKernel]:
        if self.P is None:
            return None
        P, lam = self.P, self.lam

        def scale(s, x):
            lx = np.asarray(lam(x), dtype=float) * np.ones_like(x)
            if P.scale is None:
                return lx
            ps = np.asarray(P.scale(s, x), dtype=float)
            return ps * (lx[:, None] if ps.ndim == 2 else lx)

        return MarkKernel(P.nodes, P.base_weights, scale, P.density, P.support)


def _on_boundary(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (np.abs(x) <= BOUNDARY_TOL) | (np.abs(x - 1.0) <= BOUNDARY_TOL)


def pdmp_gamma_tilde() -> PredictableField:
    return PredictableField(lambda s, e, x: np.where(_on_boundary(x), 0.0, np.asarray(e, dtype=float) - x), name="pdmp gamma")


def _bisect(fn: Callable, lo: float, hi: float, tol: float) -> float:
    """Smallest-ish root of an increasing-sign function with ``fn(lo) < 0 <= fn(hi)``."""
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if fn(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


def simulate_pdmp(spec: PdmpSpec, grid: TimeGrid, seed: int) -> ForwardRealization:
    T = grid.horizon
    rc = _rng.stream(seed, _rng.EXIT_CLOCK)
    rm = _rng.stream(seed, _rng.MARKS)
    # well below the 1e-10 resolution needed so that hits on grid points snap
    bis_tol = 4 * np.finfo(float).eps * max(1.0, T)

    def field_(y):
        return np.array([float(spec.h(y[0])), float(spec.lam(min(max(y[0], 0.0), 1.0)))])

    def advance(y, dt):
        n = spec.substeps
        for _ in range(n):
            y = rk4_step(field_, y, dt / n)
        return y

    t = 0.0
    y = np.array([spec.x0, 0.0])
    clock = rc.exponential()
    rec_t, rec_x = [0.0], [spec.x0]
    times, marks, tags, jumps, atoms, xp_jumps = [], [], [], [], [], []
    pts = grid.points
    k = 1
    while k < pts.size:
        t_next = pts[k]
        dt = t_next - t
        y_end = advance(y, dt)
        g_end, lam_end = y_end
        hit_b = g_end >= 1.0 - BOUNDARY_TOL or g_end <= BOUNDARY_TOL
        hit_i = lam_end >= clock
        if not (hit_b or hit_i):
            t, y = t_next, y_end
            rec_t.append(t)
            rec_x.append(float(y[0]))
            k += 1
            continue
        cands = []
        if hit_b:
            target = 1.0 if g_end >= 0.5 else 0.0
            sgn = 1.0 if target == 1.0 else -1.0
            tau = _bisect(lambda u: sgn * (advance(y, u)[0] - target), 0.0, dt, bis_tol)
            cands.append((tau, "boundary", target))
        if hit_i:
            tau = _bisect(lambda u: advance(y, u)[1] - clock, 0.0, dt, bis_tol)
            cands.append((tau, "interior", None))
        tau, kind, target = min(cands, key=lambda c: c[0])
        s = grid.snap(t + tau)
        if s >= T * (1 - HORIZON_GUARD):
            # events at the horizon itself are not simulated
            t, y = t_next, y_end
            rec_t.append(t)
            rec_x.append(min(max(float(y[0]), 0.0), 1.0))
            k += 1
            continue
        y_ev = advance(y, s - t) if s > t else y.copy()
        if kind == "boundary":
            if abs(y_ev[0] - target) > 1e-6:
                raise SimulationError(f"flow escaped [0, 1] near t={s}: located state {y_ev[0]}")
            x_left = target
            e = float(spec.beta(x_left))
            atoms.append(CompensatorAtom.point(s, e, 1.0))
            xp_jumps.append((s, e - x_left))
        else:
            x_left = float(y_ev[0])
            if not 0.0 <= x_left <= 1.0:
                raise SimulationError(f"flow escaped [0, 1] at t={s}")
            e = spec.P.sample(rm, s, x_left)
            clock = rc.exponential()
            y_ev[1] = 0.0
        times.append(s)
        marks.append(e)
        tags.append(kind)
        if e != x_left:
            jumps.append((s, e - x_left))
        if s == rec_t[-1]:
            rec_x[-1] = e
        else:
            rec_t.append(s)
            rec_x.append(e)
        t = s
        y = np.array([e, y_ev[1] if kind == "boundary" else 0.0])
        if s == t_next:
            k += 1
    fine = TimeGrid(np.array(rec_t))
    if not fine.contains(grid):
        raise SimulationError("internal error: refined grid lost a base point")
    vals = np.array(rec_x)
    path = CadlagPath(fine, vals, np.array([j[0] for j in jumps]), np.array([j[1] for j in jumps]))
    mu = MeasureRealization(np.array(times), np.array(marks))
    nu = CompensatorSpec(rate=spec.rate_kernel(), atoms=tuple(atoms), path=path)
    pstar = CadlagPath.from_parts(fine, np.zeros(len(fine)), [(a.time, 1.0) for a in atoms])
    aux = {"pstar": pstar, "xp_jumps": xp_jumps, "tags": tags}
    return ForwardRealization(path, mu, nu, pdmp_gamma_tilde(), aux, "pdmp", seed)


# -- ensembles ---------------------------------------------------------------

SIMULATORS = {
    JumpDiffusionSpec: simulate_jump_diffusion,
    PureJumpSpec: simulate_pure_jump,
    PdmpSpec: simulate_pdmp,
}


def simulate(spec, grid: TimeGrid, seed: int) -> ForwardRealization:
    return SIMULATORS[type(spec)](spec, grid, seed)


def simulate_ensemble(spec, grid: TimeGrid, n_paths: int, master_seed: int, workers: int = 1) -> ForwardEnsemble:
    """Simulate ``n_paths`` paths with per-path seeds derived from ``master_seed``.

    Results do not depend on ``workers``: each path owns its random streams and
    the output keeps path-index order.
    """
    seeds = [_rng.path_seed(master_seed, i) for i in range(n_paths)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reals = list(pool.map(lambda s: simulate(spec, grid, s), seeds))
    else:
        reals = [simulate(spec, grid, s) for s in seeds]
    return ForwardEnsemble(grid, tuple(reals))


# -- reconciliation ----------------------------------------------------------


@dataclass
class ReconcileReport:
    violations: list = field(default_factory=list)
    n_atoms: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def reconcile(fr: ForwardRealization, tol: float = 1e-9) -> ReconcileReport:
    """Check that path jumps, mu-atoms, gamma~ and the predictable part fit together.

    * at every mu-atom, ``Delta X - Delta X^p = gamma~(s, e)``;
    * every jump of ``X`` happens at a mu-atom or at a compensator atom;
    * ``Delta X^p`` is supported on the compensator atom times;
    * ``X - int gamma~ d(mu - nu)`` jumps exactly by ``Delta X^p`` (and equals the
      simulator's own ``X^p`` path when it kept one).
    """
    rep = ReconcileReport(n_atoms=len(fr.mu))
    path, mu, nu = fr.path, fr.mu, fr.nu
    scale = 1.0 + float(np.max(np.abs(path.values)))
    xp = {path.grid.snap(t): v for t, v in fr.xp_jumps}
    jmap = dict(zip(path.jump_times.tolist(), path.jump_sizes.tolist()))
    jset = set(nu.atom_times.tolist())
    if len(mu):
        x_left = np.atleast_1d(path.left_at(mu.times))
        g = np.broadcast_to(fr.gamma_tilde(mu.times, mu.marks, x_left), mu.times.shape)
        for i, (s, e) in enumerate(mu.atoms):
            dxi = jmap.get(s, 0.0) - xp.get(s, 0.0)
            if abs(dxi - g[i]) > tol * scale:
                rep.violations.append({"check": "atom_jump", "time": s, "mark": e, "delta_xi": dxi, "gamma_tilde": float(g[i])})
    atom_times = set(mu.times.tolist())
    for s in jmap:
        if s not in atom_times and s not in jset:
            rep.violations.append({"check": "unexplained_jump", "time": s})
    for s in xp:
        if s not in jset:
            rep.violations.append({"check": "xp_off_J", "time": s})
    xi = compensated_integral(fr.gamma_tilde, mu, nu, path.grid)
    xp_vals = path.values - xi.at(path.grid.points)
    dxp = np.zeros(len(path.grid))
    for s, v in xp.items():
        dxp[path.grid.index(s)] += v
    rec_jumps = np.zeros(len(path.grid))
    rec_jumps[path.jump_index] = path.jump_sizes
    xi_jumps = np.zeros(len(path.grid))
    for s, v in xi.jumps:
        try:
            xi_jumps[path.grid.index(s)] += v
        except KeyError:
            rep.violations.append({"check": "xi_jump_off_grid", "time": s})
    bad = np.flatnonzero(np.abs(rec_jumps - xi_jumps - dxp) > tol * scale)
    # an atom already flagged above also breaks this bookkeeping; report it once
    flagged = {v["time"] for v in rep.violations if v["check"] == "atom_jump"}
    for i in bad:
        if float(path.grid.points[i]) in flagged:
            continue
        rep.violations.append({"check": "xp_jump", "time": float(path.grid.points[i]), "expected": float(dxp[i]), "found": float(rec_jumps[i] - xi_jumps[i])})
    own = fr.aux.get("xp")
    if isinstance(own, CadlagPath) and not flagged:
        diff = np.abs(own.at(path.grid.points) - xp_vals)
        if diff.max() > 1e-8 * scale:
            rep.violations.append({"check": "xp_path", "max_abs_diff": float(diff.max())})
    return rep
