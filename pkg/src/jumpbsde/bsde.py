"""Backward solvers.

The equation solved is

    Y_t = g(X_T) + int_t^T f(s, X_{s-}, Y_{s-}, Z_s, Gamma_s) dC_s
          - int_t^T Z_s dW_s - int_t^T int U_s(e) (mu - nu)(ds de)

with ``dC_s = ds + sum_S DeltaA_S delta_S(ds)`` (the clock plus the atoms of
the compensator) and ``Gamma_s = int U_s(e) rho(e) nu^rate_s(de)``. ``Z`` is
only present when the forward model carries a Brownian driver.

Two solvers are provided: least-squares Monte Carlo on path ensembles
(:func:`solve_regression`) and a backward RK4 for finite state spaces
(:func:`solve_finite_state`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .forward import ForwardEnsemble, ForwardRealization, PureJumpSpec, state_index
from .measure import PredictableField, compensated_integral
from .paths import TIME_TOL, CadlagPath, TimeGrid

MIN_PATHS = 100


class SolverError(RuntimeError):
    pass


class FixedPointError(SolverError):
    pass


class StiffnessWarning(UserWarning):
    pass


def _zero_f(s, x, y, z, gamma):
    return np.zeros(np.broadcast(s, x, y, z, gamma).shape)


@dataclass(frozen=True, eq=False)
class DriverSpec:
    """Terminal function ``g`` and driver ``f(s, x, y, z, gamma)`` (vectorized)."""

    terminal: Callable
    f: Callable = _zero_f
    rho: Optional[Callable] = None
    L_y: float = 0.0
    L_u: float = 0.0
    L_z: float = 0.0
    eps: float = 0.1
    atoms_in_clock: bool = True

    @classmethod
    def linear(cls, terminal: Callable, c0=0.0, cx=0.0, a=0.0, cz=0.0, cu=0.0, eps=0.1) -> "DriverSpec":
        """``f = c0 + cx x + a y + cz z + cu Gamma`` with ``rho = 1``."""

        def f(s, x, y, z, gamma):
            return c0 + cx * np.asarray(x, dtype=float) + a * np.asarray(y, dtype=float) + cz * np.asarray(z, dtype=float) + cu * np.asarray(gamma, dtype=float)

        return cls(terminal, f, None, abs(a), abs(cu), abs(cz), eps)

    def rho_at(self, e: np.ndarray) -> np.ndarray:
        return np.ones_like(e) if self.rho is None else np.asarray(self.rho(e), dtype=float)

    def check_atoms(self, max_atom_mass: float) -> None:
        """Well-posedness condition ``2 L_y^2 DeltaA^2 <= 1 - eps`` at compensator atoms."""
        if not self.atoms_in_clock or max_atom_mass <= 0:
            return
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if 2 * self.L_y**2 * max_atom_mass**2 > 1 - self.eps:
            raise FixedPointError(f"2 L_y^2 DeltaA^2 = {2 * self.L_y**2 * max_atom_mass**2:.4g} exceeds 1 - eps = {1 - self.eps}")


# -- bases -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Basis:
    """State basis fitted at one time slice."""

    kind: str
    params: tuple

    @classmethod
    def fit(cls, kind: str, x: np.ndarray, order: int, states: Optional[np.ndarray] = None) -> "Basis":
        if order < 1:
            raise ValueError("basis order must be >= 1")
        if kind == "poly":
            m, s = float(np.mean(x)), float(np.std(x))
            return cls("poly", (m, s if s > 1e-12 else 0.0, order))
        if kind == "indicator":
            if states is not None:
                return cls("states", (np.asarray(states, dtype=float),))
            if float(np.ptp(x)) <= 1e-12:
                return cls("poly", (float(np.mean(x)), 0.0, order))
            edges = np.unique(np.quantile(x, np.linspace(0, 1, order + 1)[1:-1]))
            return cls("bins", (edges,))
        raise ValueError(f"unknown basis family {kind!r}")

    @property
    def size(self) -> int:
        if self.kind == "poly":
            return 1 if self.params[1] == 0.0 else self.params[2] + 1
        if self.kind == "states":
            return self.params[0].size
        return self.params[0].size + 1

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "poly":
            m, s, order = self.params
            if s == 0.0:
                return np.ones((x.size, 1))
            z = (x - m) / s
            return np.vander(z, order + 1, increasing=True)
        if self.kind == "states":
            idx = state_index(self.params[0], x)
            out = np.zeros((x.size, self.params[0].size))
            out[np.arange(x.size), idx] = 1.0
            return out
        idx = np.searchsorted(self.params[0], x, side="right")
        out = np.zeros((x.size, self.size))
        out[np.arange(x.size), idx] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class MarkPartition:
    """Either exact mark values (``edges is None``) or intervals cut at ``edges``."""

    values: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.values.size if self.values is not None else self.edges.size + 1

    def index(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        if self.values is not None:
            if self.values.size == 0:
                return np.zeros(e.shape, dtype=int)
            idx = np.abs(e.reshape(-1, 1) - self.values[None, :]).argmin(axis=1).reshape(e.shape)
            return idx
        return np.searchsorted(self.edges, e, side="right")

    @classmethod
    def for_ensemble(cls, ensemble: Sequence[ForwardRealization], n_bins: int = 8, max_exact: int = 32) -> "MarkPartition":
        vals = set()
        exact = True
        for r in ensemble:
            if r.nu.rate is not None:
                if not r.nu.rate.is_discrete:
                    exact = False
                    break
                vals.update(r.nu.rate.nodes.tolist())
            for a in r.nu.atoms:
                vals.update(a.marks.tolist())
            if len(vals) > max_exact:
                exact = False
                break
        if exact:
            return cls(values=np.array(sorted(vals)))
        marks = np.concatenate([r.mu.marks for r in ensemble] + [np.empty(0)])
        if marks.size == 0:
            return cls(values=np.empty(0))
        edges = np.unique(np.quantile(marks, np.linspace(0, 1, n_bins + 1)[1:-1]))
        return cls(edges=edges)


# -- per-step increments of the compensated measure --------------------------


def _step_index(base: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Index ``k`` with ``t_k < s <= t_{k+1}``."""
    tol = TIME_TOL * max(1.0, base[-1])
    return np.clip(np.searchsorted(base, s - tol, side="left") - 1, 0, base.size - 2)


def compensated_counts(r: ForwardRealization, grid: TimeGrid, part: MarkPartition, x_base: Optional[np.ndarray] = None) -> np.ndarray:
    """``(mu - nu)((t_k, t_{k+1}] x bin_m)`` for one path, shape ``(N, M)``.

    The rate part is frozen at ``(t_k, X_{t_k})`` over each step, so a mark
    that cannot be reached from ``X_{t_k}`` contributes a column that is zero
    except on paths with two or more events in the step.
    """
    base = grid.points
    out = np.zeros((grid.steps, part.size))
    if part.size == 0:
        return out
    if len(r.mu):
        np.add.at(out, (_step_index(base, r.mu.times), part.index(r.mu.marks)), 1.0)
    nu = r.nu
    if nu.rate is not None:
        x = r.path.at(base[:-1]) if x_base is None else x_base[:-1]
        w = nu.rate.weights(base[:-1], x) * np.diff(base)[:, None]
        bins = part.index(nu.rate.nodes)
        for j in range(nu.rate.nodes.size):
            out[:, bins[j]] -= w[:, j]
    for a in nu.atoms:
        k = _step_index(base, np.array([a.time]))[0]
        np.add.at(out[k], part.index(a.marks), -a.weights)
    return out


def _rate_moments(r: ForwardRealization, times: np.ndarray, x: np.ndarray, part: MarkPartition, rho: Callable) -> np.ndarray:
    """``int_{bin_m} rho(e) nu^rate(t_k, x_k; de)`` per step, shape ``(len(times), M)``."""
    out = np.zeros((times.size, part.size))
    rate = r.nu.rate
    if rate is None or part.size == 0:
        return out
    w = rate.weights(times, x) * rho(rate.nodes)[None, :]
    bins = part.index(rate.nodes)
    for j in range(rate.nodes.size):
        out[:, bins[j]] += w[:, j]
    return out


# -- solution container ------------------------------------------------------


@dataclass(eq=False)
class BsdeSolution:
    grid: TimeGrid
    y: np.ndarray
    z: Optional[np.ndarray]
    bases: list
    u_coef: list
    partition: MarkPartition
    y0: float
    stderr: float
    settings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    u_override: Optional[PredictableField] = None

    def y_path(self, i: int) -> CadlagPath:
        return CadlagPath(self.grid, self.y[i])

    def u_value(self, s, e, x) -> np.ndarray:
        s, e, x = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(e, dtype=float), np.asarray(x, dtype=float))
        shape = s.shape
        s, e, x = s.ravel(), e.ravel(), x.ravel()
        out = np.zeros(s.size)
        if self.partition.size == 0 or s.size == 0:
            return out.reshape(shape)
        k = _step_index(self.grid.points, s)
        m = self.partition.index(e)
        fast = self._stacked()
        if fast is not None:
            coef, basis_of = fast
            B = basis_of(k, x)
            out[:] = np.einsum("ip,ip->i", B, coef[k, m, : B.shape[1]])
            return out.reshape(shape)
        for kk in np.unique(k):
            sel = k == kk
            d = self.u_coef[kk]  # (M, pu)
            B = self.bases[kk](x[sel])[:, : d.shape[1]]
            out[sel] = np.einsum("ip,ip->i", B, d[m[sel]])
        return out.reshape(shape)

    def _stacked(self):
        """Coefficients as one ``(steps, M, P)`` array plus a vectorized basis, when possible."""
        cache = self.diagnostics.get("_stacked_u")
        if cache is not None:
            return cache[0]
        kinds = {b.kind for b in self.bases}
        result = None
        if kinds == {"poly"} or kinds == {"states"}:
            P = max(b.size for b in self.bases)
            coef = np.zeros((len(self.u_coef), self.partition.size, P))
            for kk, d in enumerate(self.u_coef):
                coef[kk, :, : d.shape[1]] = d
            if kinds == {"poly"}:
                mean = np.array([b.params[0] for b in self.bases])
                sd = np.array([b.params[1] for b in self.bases])
                order = max(b.params[2] for b in self.bases)

                def basis_of(k, x):
                    safe = np.where(sd[k] > 0, sd[k], 1.0)
                    z = np.where(sd[k] > 0, (x - mean[k]) / safe, 0.0)
                    return np.vander(z, order + 1, increasing=True)

            else:
                states = self.bases[0].params[0]
                if not all(np.array_equal(b.params[0], states) for b in self.bases):
                    self.diagnostics["_stacked_u"] = (None,)
                    return None

                def basis_of(k, x):
                    out = np.zeros((x.size, states.size))
                    out[np.arange(x.size), state_index(states, x)] = 1.0
                    return out

            result = (coef, basis_of)
        self.diagnostics["_stacked_u"] = (result,)
        return result

    def u_field(self) -> PredictableField:
        if self.u_override is not None:
            return self.u_override
        return PredictableField(self.u_value, name="U (fitted)")

    def summary(self) -> dict:
        return {
            "y0": self.y0,
            "stderr": self.stderr,
            "settings": self.settings,
            "diagnostics": {k: v for k, v in self.diagnostics.items() if np.isscalar(v) or isinstance(v, (list, str))},
        }


# -- regression solver -------------------------------------------------------


def _lstsq_projector(A: np.ndarray, support: np.ndarray, min_support: int):
    """Least-squares solver for a fixed design.

    ``support[j]`` counts the observations that actually inform column ``j``
    (paths with an event in the bin, for jump columns); columns below
    ``min_support`` are dropped and reported in the returned mask.
    """
    keep = (support >= min_support) & (np.abs(A).max(axis=0) > 0)
    keep[0] = keep[0] or bool(np.any(A[:, 0] != 0))
    Ak = A[:, keep]
    if Ak.shape[1] == 0:
        return lambda y: np.zeros(A.shape[1]), np.inf, keep
    # column scaling makes the condition number a property of the design, not of units
    norms = np.linalg.norm(Ak, axis=0)
    q, r = np.linalg.qr(Ak / norms)
    sv = np.linalg.svd(r, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    rinv = np.linalg.pinv(r, rcond=1e-12) / norms[:, None]

    def solve(y):
        coef = np.zeros(A.shape[1])
        coef[keep] = rinv @ (q.T @ y)
        return coef

    return solve, cond, keep


def solve_regression(
    ensemble: ForwardEnsemble,
    driver: DriverSpec,
    basis: str = "poly",
    order: int = 2,
    states: Optional[Sequence[float]] = None,
    partition: Optional[MarkPartition] = None,
    use_z: Optional[bool] = None,
    theta: float = 0.8,
    fp_tol: float = 1e-10,
    fp_max_iter: int = 100,
    min_support: int = 5,
    u_order: Optional[int] = None,
) -> BsdeSolution:
    """Least-squares Monte Carlo backward induction on the ensemble's base grid.

    At each step ``Y_{k+1}`` (plus the driver's atom terms) is regressed on
    ``[B(X_k), B(X_k) DeltaW_k, B(X_k) Ntilde_{k,m}]`` where ``Ntilde_{k,m}`` is
    the compensated count of marks in bin ``m`` over the step. The three
    blocks give the conditional mean, ``Z_k`` and ``U_k(x, m)``. ``Y_k`` then
    solves ``Y_k = E_k[...] + f(t_k, X_k, Y_k, Z_k, Gamma_k) dt`` by damped
    fixed-point iteration.

    ``u_order`` truncates the polynomial basis used for ``U`` (jump events are
    much rarer than Brownian increments, so ``U`` usually needs a smaller
    basis than ``Y``); it is ignored for indicator bases.
    """
    n = len(ensemble)
    if n < MIN_PATHS:
        raise SolverError(f"solve_regression needs at least {MIN_PATHS} paths, got {n}")
    grid = ensemble.grid
    base = grid.points
    N = grid.steps
    X = ensemble.values()
    reals = ensemble.realizations
    if use_z is None:
        use_z = all("dW" in r.aux for r in reals)
    dW = np.stack([r.aux["dW"] for r in reals]) if use_z else None
    part = partition if partition is not None else MarkPartition.for_ensemble(reals)
    M = part.size
    Ntil = np.stack([compensated_counts(r, grid, part, X[i]) for i, r in enumerate(reals)]) if M else np.zeros((n, N, 0))
    counts = np.zeros((n, N, M))
    for i, r in enumerate(reals):
        if len(r.mu) and M:
            np.add.at(counts[i], (_step_index(base, r.mu.times), part.index(r.mu.marks)), 1.0)
    rho = driver.rho_at

    # driver atoms: (step, mass, time, left state) per path
    atom_mass = np.zeros((n, N))
    atom_x = np.zeros((n, N))
    atom_t = np.zeros((n, N))
    max_mass = 0.0
    if driver.atoms_in_clock:
        for i, r in enumerate(reals):
            for a in r.nu.atoms:
                if a.time > grid.horizon + TIME_TOL:
                    continue
                k = _step_index(base, np.array([a.time]))[0]
                if atom_mass[i, k] != 0:
                    raise SolverError("more than one compensator atom in a single step; refine the grid")
                atom_mass[i, k] = a.mass
                atom_t[i, k] = a.time
                atom_x[i, k] = float(r.path.left_at(a.time))
                max_mass = max(max_mass, a.mass)
    driver.check_atoms(max_mass)

    rate_mom = np.zeros((n, N, M))
    if M:
        for i, r in enumerate(reals):
            rate_mom[i] = _rate_moments(r, base[:-1], X[i, :-1], part, rho)

    Y = np.empty((n, N + 1))
    Y[:, N] = np.asarray(driver.terminal(X[:, N]), dtype=float)
    Z = np.zeros((n, N)) if use_z else None
    bases: list = [None] * N
    u_coef: list = [None] * N
    conds = np.empty(N)
    iters = np.zeros(N, dtype=int)
    dts = np.diff(base)
    pathwise = Y[:, N].copy()
    states_arr = None if states is None else np.asarray(states, dtype=float)
    for k in range(N - 1, -1, -1):
        B = Basis.fit(basis, X[:, k], order, states_arr)
        Bk = B(X[:, k])
        p = Bk.shape[1]
        pu = p if (u_order is None or B.kind != "poly") else min(p, u_order + 1)
        Bu = Bk[:, :pu]
        blocks = [Bk]
        if use_z:
            blocks.append(Bk * dW[:, k : k + 1])
        for m in range(M):
            blocks.append(Bu * Ntil[:, k, m : m + 1])
        A = np.hstack(blocks)
        present = Bk != 0
        support = [present.sum(axis=0)]
        if use_z:
            support.append(present.sum(axis=0))
        for m in range(M):
            support.append((present[:, :pu] & (counts[:, k, m : m + 1] > 0)).sum(axis=0))
        # the last step has nothing to carry over from, so it uses every informed column
        solve, conds[k], keep = _lstsq_projector(A, np.concatenate(support), min_support if k + 1 < N else 1)
        # U coefficients the step cannot resolve are carried over from the next step
        carry = None
        if M and k + 1 < N and not keep[-M * pu :].all():
            carry = (~keep[-M * pu :]).reshape(M, pu)
        has_atoms = bool(np.any(atom_mass[:, k] > 0))

        def regress(target):
            coef = solve(target)
            a = coef[:p]
            off = p
            zc = None
            if use_z:
                zc = coef[off : off + p]
                off += p
            d = coef[off:].reshape(M, pu) if M else np.zeros((0, pu))
            if carry is not None and u_coef[k + 1].shape == d.shape:
                d = np.where(carry, u_coef[k + 1], d)
            return a, zc, d

        def drive(y_k, zk, gam):
            return np.asarray(driver.f(base[k], X[:, k], y_k, zk, gam), dtype=float) * np.ones(n)

        def atom_term(y_k, gam):
            if not has_atoms:
                return np.zeros(n)
            val = np.asarray(driver.f(atom_t[:, k], atom_x[:, k], y_k, 0.0, gam), dtype=float) * np.ones(n)
            return np.where(atom_mass[:, k] > 0, val * atom_mass[:, k], 0.0)

        a, zc, d = regress(Y[:, k + 1])
        zk = Bk @ zc if use_z else np.zeros(n)
        gam = np.einsum("im,im->i", Bu @ d.T, rate_mom[:, k, :]) if M else np.zeros(n)
        y_k = Bk @ a
        # damped fixed point for the implicit step
        prev_delta = np.inf
        for it in range(1, fp_max_iter + 1):
            at = atom_term(y_k, gam)
            if has_atoms:
                a, zc, d = regress(Y[:, k + 1] + at)
                zk = Bk @ zc if use_z else zk
                gam = np.einsum("im,im->i", Bu @ d.T, rate_mom[:, k, :]) if M else gam
            new = Bk @ a + drive(y_k, zk, gam) * dts[k]
            delta = float(np.max(np.abs(new - y_k)))
            y_k = (1 - theta) * y_k + theta * new if it > 1 else new
            iters[k] = it
            if delta <= fp_tol * (1.0 + float(np.max(np.abs(y_k)))):
                break
            if it > 5 and delta > prev_delta * 1.5:
                raise FixedPointError(f"fixed-point iteration diverges at step {k} (delta {delta:.3g})")
            prev_delta = delta
        else:
            raise FixedPointError(f"fixed-point iteration did not converge at step {k} in {fp_max_iter} iterations")
        Y[:, k] = y_k
        if use_z:
            Z[:, k] = zk
        bases[k] = B
        u_coef[k] = d
        pathwise += drive(y_k, zk, gam) * dts[k] + atom_term(y_k, gam)

    y0 = float(np.mean(Y[:, 0]))
    stderr = float(np.std(pathwise, ddof=1) / np.sqrt(n))
    settings = {"basis": basis, "order": order, "u_order": u_order, "n_paths": n, "steps": N, "use_z": bool(use_z), "marks": M, "theta": theta}
    diag = {"max_condition": float(np.max(conds)), "max_fixed_point_iterations": int(iters.max()), "condition": conds, "pathwise_mean": float(pathwise.mean())}
    if np.max(conds) > 1e12:
        warnings.warn(f"ill-conditioned regression (condition number {np.max(conds):.3g})", stacklevel=2)
    return BsdeSolution(grid, Y, Z, bases, u_coef, part, y0, stderr, settings, diag)


# -- solution built from a known value function ------------------------------


def solution_from_value(v: Callable, ensemble: ForwardEnsemble, dv_dx: Optional[Callable] = None, sigma: Optional[Callable] = None) -> BsdeSolution:
    """``Y = v(t, X_t)``, ``U_s(e) = v(s, X_{s-} + gamma~) - v(s, X_{s-})``, ``Z = sigma dv/dx``.

    Used to feed exact (oracle) solutions to :func:`residual_check` and to the
    identification checks.
    """
    grid = ensemble.grid
    X = ensemble.values()
    Y = np.asarray(v(grid.points[None, :], X), dtype=float) * np.ones_like(X)
    Z = None
    if dv_dx is not None and sigma is not None:
        t = grid.points[None, :-1]
        Z = np.asarray(sigma(X[:, :-1]) * dv_dx(t, X[:, :-1]), dtype=float) * np.ones((len(ensemble), grid.steps))
    gt = ensemble[0].gamma_tilde

    def u(s, e, x):
        return np.asarray(v(s, x + gt(s, e, x)), dtype=float) - np.asarray(v(s, x), dtype=float)

    sol = BsdeSolution(grid, Y, Z, [], [], MarkPartition(values=np.empty(0)), float(Y[:, 0].mean()), 0.0, {"provenance": "value function"})
    sol.u_override = PredictableField(u, name="v increment")
    return sol


# -- residual check ----------------------------------------------------------


@dataclass
class ResidualReport:
    per_path: np.ndarray
    mean: float
    tolerance: float
    flagged: np.ndarray

    @property
    def passed(self) -> bool:
        return self.flagged.size == 0


def residual_check(solution: BsdeSolution, ensemble: ForwardEnsemble, driver: DriverSpec, tol: float = 1e-2) -> ResidualReport:
    """Sup-norm residual of the forward form of the equation along each path.

    ``Y_t - Y_0 + int_0^t f dC - int_0^t Z dW - int_0^t int U (mu - nu)`` on the
    base grid, using :func:`compensated_integral` for the ``U`` term.
    """
    grid = ensemble.grid
    base = grid.points
    X = ensemble.values()
    n, N = X.shape[0], grid.steps
    uf = solution.u_field()
    res = np.empty(n)
    dts = np.diff(base)
    for i, r in enumerate(ensemble):
        y = solution.y[i]
        z = solution.z[i] if solution.z is not None else np.zeros(N)
        dw = r.aux["dW"] if ("dW" in r.aux and solution.z is not None) else np.zeros(N)
        gam = np.zeros(N)
        if r.nu.rate is not None:
            rate = r.nu.rate
            w = rate.weights(base[:-1], X[i, :-1]) * driver.rho_at(rate.nodes)[None, :]
            uv = uf(base[:-1, None] + 0.5 * dts[:, None], rate.nodes[None, :], X[i, :-1, None])
            gam = np.sum(w * np.broadcast_to(uv, w.shape), axis=1)
        fk = np.asarray(driver.f(base[:-1], X[i, :-1], y[:-1], z, gam), dtype=float) * np.ones(N)
        drift = np.concatenate([[0.0], np.cumsum(fk * dts)])
        if driver.atoms_in_clock:
            for a in r.nu.atoms:
                k = _step_index(base, np.array([a.time]))[0]
                xl = float(r.path.left_at(a.time))
                fa = float(np.asarray(driver.f(a.time, xl, y[k], 0.0, gam[k]), dtype=float))
                drift[k + 1 :] += fa * a.mass
        mart = np.concatenate([[0.0], np.cumsum(z * dw)])
        jump = compensated_integral(uf, r.mu, r.nu, r.path.grid).at(base)
        resid = y - y[0] + drift - mart - jump
        res[i] = float(np.max(np.abs(resid)))
    flagged = np.flatnonzero(res > tol)
    return ResidualReport(res, float(res.mean()), tol, flagged)


# -- finite-state solver -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class VTable:
    """Dense table ``v(t_j, x_i)`` on a time grid and a finite state space."""

    times: np.ndarray
    states: np.ndarray
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, t, x) -> np.ndarray:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        idx = state_index(self.states, x.ravel()).reshape(x.shape)
        j = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0, t1 = self.times[j], self.times[j + 1]
        wgt = (t - t0) / (t1 - t0)
        return (1 - wgt) * self.values[j, idx] + wgt * self.values[j + 1, idx]


def _rate_matrix(spec: PureJumpSpec, t: float) -> np.ndarray:
    states = np.asarray(spec.state_space, dtype=float)
    kern = spec.rate_kernel
    w = kern.weights(np.full(states.size, t), states)  # (n, q) over kernel nodes
    lam = np.zeros((states.size, states.size))
    cols = state_index(states, kern.nodes)
    for j in range(kern.nodes.size):
        lam[:, cols[j]] += w[:, j]
    return lam


def _finite_rhs(spec: PureJumpSpec, driver: DriverSpec, T: float):
    states = np.asarray(spec.state_space, dtype=float)
    rho = driver.rho_at(states)

    def rhs(t, v):
        lam = _rate_matrix(spec, t)
        inc = v[None, :] - v[:, None]  # inc[i, j] = v(e_j) - v(x_i)
        gam = np.sum(inc * rho[None, :] * lam, axis=1)
        drift = np.asarray(driver.f(t, states, v, 0.0, gam), dtype=float) * np.ones_like(v)
        # dv/dt = -(f + generator v)
        return -(drift + np.sum(inc * lam, axis=1))

    return rhs


def _rk4_backward(rhs, v_T: np.ndarray, T: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    times = np.linspace(0.0, T, steps + 1)
    vals = np.empty((steps + 1, v_T.size))
    vals[-1] = v_T
    v = v_T.copy()
    h = -T / steps
    for j in range(steps, 0, -1):
        t = times[j]
        k1 = rhs(t, v)
        k2 = rhs(t + 0.5 * h, v + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, v + 0.5 * h * k2)
        k4 = rhs(t + h, v + h * k3)
        v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        vals[j - 1] = v
    return times, vals


def solve_finite_state(spec: PureJumpSpec, driver: DriverSpec, horizon: float, steps: int = 200, stiff_tol: float = 1e-6) -> VTable:
    """Backward RK4 for ``-dv/dt = f(t, x, v, 0, Gamma) + sum_e (v(e) - v(x)) lambda(t, x, e)``."""
    if spec.state_space is None:
        raise ValueError("solve_finite_state needs a finite state space")
    states = np.asarray(spec.state_space, dtype=float)
    v_T = np.asarray(driver.terminal(states), dtype=float) * np.ones(states.size)
    rhs = _finite_rhs(spec, driver, horizon)
    times, vals = _rk4_backward(rhs, v_T, horizon, steps)
    _, fine = _rk4_backward(rhs, v_T, horizon, 2 * steps)
    change = float(np.max(np.abs(fine[::2] - vals)))
    diag = {"halving_change": change, "stiff": change > stiff_tol}
    if diag["stiff"]:
        warnings.warn(f"finite-state system looks stiff: step halving changes v by {change:.3g}", StiffnessWarning, stacklevel=2)
    return VTable(times, states, vals, diag)


def gronwall_bound(spec: PureJumpSpec, driver: DriverSpec, horizon: float, t) -> np.ndarray:
    """``(|g|_inf + (T - t) |f(., 0)|_inf) exp(L (T - t))`` with ``L = L_y + 2 L_u |rho|_inf rate_bound``."""
    states = np.asarray(spec.state_space, dtype=float)
    g_inf = float(np.max(np.abs(driver.terminal(states))))
    f0 = float(np.max(np.abs(np.asarray(driver.f(0.0, states, 0.0, 0.0, 0.0), dtype=float))))
    rho_inf = float(np.max(np.abs(driver.rho_at(states))))
    L = driver.L_y + 2 * driver.L_u * rho_inf * spec.rate_bound
    tau = horizon - np.asarray(t, dtype=float)
    return (g_inf + tau * f0) * np.exp(L * tau)
