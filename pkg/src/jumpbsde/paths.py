"""Cadlag paths recorded on a time grid, with explicit jump atoms.

A path stores its right-continuous value at every grid point and, separately,
the list of jumps. Left limits are never interpolated: at a jump time the left
limit is ``value - jump size``, elsewhere it is the grid value itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# two times closer than this (relative to the horizon) are the same grid point
TIME_TOL = 1e-12


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times ``0 = t_0 < ... < t_N = T``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a time grid needs at least two points")
        if pts[0] != 0.0:
            raise ValueError("a time grid starts at 0")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if horizon <= 0 or steps < 1:
            raise ValueError("need horizon > 0 and steps >= 1")
        pts = np.linspace(0.0, horizon, steps + 1)
        return cls(pts)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def steps(self) -> int:
        return self.points.size - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.points)

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def snap(self, t: float) -> float:
        """Return the grid point within tolerance of ``t``, or ``t`` itself."""
        tol = TIME_TOL * max(1.0, self.horizon)
        i = np.searchsorted(self.points, t)
        for j in (i - 1, i):
            if 0 <= j < self.points.size and abs(self.points[j] - t) <= tol:
                return float(self.points[j])
        return float(t)

    def with_points(self, times: Sequence[float]) -> "TimeGrid":
        """Refinement containing every point of this grid plus ``times``."""
        extra = [self.snap(t) for t in times]
        merged = np.union1d(self.points, np.asarray(extra, dtype=float))
        return TimeGrid(merged)

    def index(self, t: float) -> int:
        """Index of the grid point equal to ``t`` (within tolerance)."""
        tol = TIME_TOL * max(1.0, self.horizon)
        i = int(np.searchsorted(self.points, t - tol))
        if i >= self.points.size or abs(self.points[i] - t) > tol:
            raise KeyError(f"time {t!r} is not a grid point")
        return i

    def contains(self, other: "TimeGrid") -> bool:
        idx = np.searchsorted(self.points, other.points)
        idx = np.clip(idx, 0, self.points.size - 1)
        return bool(np.all(np.abs(self.points[idx] - other.points) <= TIME_TOL * max(1.0, self.horizon)))


@dataclass(frozen=True, eq=False)
class CadlagPath:
    """Right-continuous path with explicit jump table.

    ``values[i]`` is ``X`` at ``grid.points[i]``. Every jump time is a grid
    point and ``jump_sizes`` are nonzero.
    """

    grid: TimeGrid
    values: np.ndarray
    jump_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    jump_sizes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.points.shape:
            raise ValueError("one value per grid point is required")
        jt = np.asarray(self.jump_times, dtype=float).reshape(-1)
        js = np.asarray(self.jump_sizes, dtype=float).reshape(-1)
        if jt.shape != js.shape:
            raise ValueError("jump times and sizes differ in length")
        if np.any(js == 0.0):
            raise ValueError("jump sizes must be nonzero")
        if jt.size:
            if np.any(jt <= 0.0) or np.any(jt > self.grid.horizon):
                raise ValueError("jump times must lie in (0, T]")
            if not np.all(np.diff(jt) > 0):
                raise ValueError("jump times must be strictly increasing")
            # raises if a jump time is off-grid
            idx = np.array([self.grid.index(t) for t in jt], dtype=int)
        else:
            idx = np.empty(0, dtype=int)
        for arr in (vals, jt, js, idx):
            arr.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_sizes", js)
        object.__setattr__(self, "_jump_index", idx)

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> "CadlagPath":
        return cls(grid, np.full(len(grid), float(value)))

    @property
    def initial(self) -> float:
        return float(self.values[0])

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    @property
    def jumps(self) -> list[tuple[float, float]]:
        return list(zip(self.jump_times.tolist(), self.jump_sizes.tolist()))

    @property
    def jump_index(self) -> np.ndarray:
        return self._jump_index

    def left_limits(self) -> np.ndarray:
        """``X_{t-}`` at every grid point (``X_{0-} = X_0``)."""
        left = self.values.copy()
        left[self._jump_index] = self.values[self._jump_index] - self.jump_sizes
        return left

    def jump_array(self) -> np.ndarray:
        """``Delta X`` at every grid point."""
        out = np.zeros_like(self.values)
        out[self._jump_index] = self.jump_sizes
        return out

    def at(self, times) -> np.ndarray:
        """Right-continuous readout: value at the last grid point ``<= t``."""
        t = np.asarray(times, dtype=float)
        tol = TIME_TOL * max(1.0, self.grid.horizon)
        i = np.searchsorted(self.grid.points, t + tol, side="right") - 1
        return self.values[np.clip(i, 0, None)]

    def left_at(self, times) -> np.ndarray:
        """``X_{t-}``: last grid value strictly before ``t``, jump-corrected at grid points."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        out = self.at(t).copy()
        jt = self.jump_times
        if jt.size:
            tol = TIME_TOL * max(1.0, self.grid.horizon)
            k = np.searchsorted(jt, t - tol)
            hit = (k < jt.size) & (np.abs(jt[np.minimum(k, jt.size - 1)] - t) <= tol)
            out[hit] -= self.jump_sizes[k[hit]]
        return out if np.ndim(times) else out[0]

    def restrict(self, grid: TimeGrid) -> np.ndarray:
        """Values at the points of a coarser grid contained in this one."""
        return self.at(grid.points)

    def continuous_part(self) -> np.ndarray:
        """Values with all jumps removed (cumulative jumps subtracted)."""
        return self.values - np.cumsum(self.jump_array())

    @classmethod
    def from_parts(cls, grid: TimeGrid, continuous: np.ndarray, jumps: Sequence[tuple[float, float]]) -> "CadlagPath":
        """Rebuild a path from its continuous part and a jump list."""
        jumps = sorted((grid.snap(t), s) for t, s in jumps if s != 0.0)
        dx = np.zeros(len(grid))
        for t, s in jumps:
            dx[grid.index(t)] += s
        vals = np.asarray(continuous, dtype=float) + np.cumsum(dx)
        jt = np.array([t for t, _ in jumps], dtype=float)
        js = np.array([s for _, s in jumps], dtype=float)
        return cls(grid, vals, jt, js)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Paths observed on a shared base grid, one seed per path.

    Individual paths may carry refinements of the base grid (event times of
    the simulators are inserted exactly); ensemble statistics read every path
    on the base grid.
    """

    grid: TimeGrid
    paths: tuple[CadlagPath, ...]
    seeds: tuple[int, ...]

    def __post_init__(self):
        paths = tuple(self.paths)
        seeds = tuple(int(s) for s in self.seeds)
        if len(paths) != len(seeds):
            raise ValueError("one seed per path is required")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        for p in paths:
            if not p.grid.contains(self.grid):
                raise GridMismatchError("every path grid must contain the ensemble grid")
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "seeds", seeds)

    def __len__(self) -> int:
        return len(self.paths)

    def __iter__(self) -> Iterator[CadlagPath]:
        return iter(self.paths)

    def __getitem__(self, i) -> CadlagPath:
        return self.paths[i]

    def values(self) -> np.ndarray:
        """Array of shape ``(n_paths, len(grid))`` of values on the base grid."""
        if not self.paths:
            return np.empty((0, len(self.grid)))
        return np.stack([p.restrict(self.grid) for p in self.paths])


@dataclass(frozen=True)
class OrthogonalityResult:
    mean: float
    stderr: float
    passed: bool
    n_paths: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "pass": self.passed, "n_paths": self.n_paths}


def jump_measure(path: CadlagPath):
    """Atoms ``(s, Delta X_s)`` of the jump measure of ``path``."""
    from .measure import MeasureRealization

    return MeasureRealization(path.jump_times.copy(), path.jump_sizes.copy())


def discrete_bracket(x: CadlagPath, y: CadlagPath) -> float:
    """Realized covariation ``sum (x_{k+1}-x_k)(y_{k+1}-y_k)`` on the shared grid."""
    if x.grid != y.grid:
        raise GridMismatchError("discrete_bracket needs both paths on the same grid")
    return float(np.dot(np.diff(x.values), np.diff(y.values)))


def bracket_values(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise realized covariation of two ``(n, N+1)`` value arrays."""
    return np.einsum("ij,ij->i", np.diff(x, axis=-1), np.diff(y, axis=-1))


MIN_ORTHOGONALITY_PATHS = 30


def orthogonality_test(y: PathEnsemble | np.ndarray, n: PathEnsemble | np.ndarray, nsigma: float = 3.0) -> OrthogonalityResult:
    """Zero-mean test of the bracket ``[Y, N]_T`` across an ensemble.

    Passes when the sample mean lies within ``nsigma`` standard errors of 0.
    Accepts ensembles or pre-sampled ``(n_paths, len(grid))`` arrays.
    """
    yv = y.values() if isinstance(y, PathEnsemble) else np.asarray(y, dtype=float)
    nv = n.values() if isinstance(n, PathEnsemble) else np.asarray(n, dtype=float)
    if isinstance(y, PathEnsemble) and isinstance(n, PathEnsemble) and y.grid != n.grid:
        raise GridMismatchError("ensembles must share a grid")
    if yv.shape != nv.shape:
        raise GridMismatchError(f"shape mismatch {yv.shape} vs {nv.shape}")
    m = yv.shape[0]
    if m < MIN_ORTHOGONALITY_PATHS:
        raise ValueError(f"orthogonality test needs at least {MIN_ORTHOGONALITY_PATHS} paths, got {m}")
    b = bracket_values(yv, nv)
    mean = float(b.mean())
    stderr = float(b.std(ddof=1) / np.sqrt(m))
    return OrthogonalityResult(mean, stderr, abs(mean) <= nsigma * stderr, m)


# -- serialization -----------------------------------------------------------
#
# Binary: a single ``.npz`` with columnar arrays
#   grid (N+1,), seeds (n,), offsets (n+1,), times, values (concatenated path
#   grids / values), jump_path, jump_time, jump_size.
# CSV: a directory with grid.csv (t), paths.csv (path_id, seed),
#   values.csv (path_id, t, value) and jumps.csv (path_id, t, size).
# Floats are written with ``repr`` so text round-trips are exact.


def save_ensemble(ensemble: PathEnsemble, file) -> None:
    offsets = np.zeros(len(ensemble) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(p.grid) for p in ensemble])
    cat = lambda xs: np.concatenate(xs) if xs else np.empty(0)  # noqa: E731
    np.savez(
        file,
        grid=ensemble.grid.points,
        seeds=np.array([s & 0xFFFFFFFFFFFFFFFF for s in ensemble.seeds], dtype=np.uint64),
        offsets=offsets,
        times=cat([p.grid.points for p in ensemble]),
        values=cat([p.values for p in ensemble]),
        jump_path=cat([np.full(p.jump_times.size, i, dtype=np.int64) for i, p in enumerate(ensemble)]).astype(np.int64),
        jump_time=cat([p.jump_times for p in ensemble]),
        jump_size=cat([p.jump_sizes for p in ensemble]),
    )


def load_ensemble(file) -> PathEnsemble:
    with np.load(file) as z:
        grid = TimeGrid(z["grid"])
        offsets = z["offsets"]
        times, values = z["times"], z["values"]
        jp, jt, js = z["jump_path"], z["jump_time"], z["jump_size"]
        seeds = [int(s) for s in z["seeds"]]
    paths = []
    for i in range(len(seeds)):
        sl = slice(offsets[i], offsets[i + 1])
        mask = jp == i
        paths.append(CadlagPath(TimeGrid(times[sl]), values[sl], jt[mask], js[mask]))
    return PathEnsemble(grid, tuple(paths), tuple(seeds))


def write_ensemble_csv(ensemble: PathEnsemble, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"])
        w.writerows([repr(float(t))] for t in ensemble.grid.points)
    with open(d / "paths.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "seed"])
        w.writerows([i, s] for i, s in enumerate(ensemble.seeds))
    with open(d / "values.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t", "value"])
        for i, p in enumerate(ensemble):
            w.writerows([i, repr(float(t)), repr(float(v))] for t, v in zip(p.grid.points, p.values))
    with open(d / "jumps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t", "size"])
        for i, p in enumerate(ensemble):
            w.writerows([i, repr(float(t)), repr(float(s))] for t, s in zip(p.jump_times, p.jump_sizes))
    return d


def read_ensemble_csv(directory) -> PathEnsemble:
    d = Path(directory)

    def rows(name):
        with open(d / name, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            return list(r)

    grid = TimeGrid(np.array([float(r[0]) for r in rows("grid.csv")]))
    seeds = [int(r[1]) for r in rows("paths.csv")]
    vals: dict[int, list] = {i: [] for i in range(len(seeds))}
    for pid, t, v in rows("values.csv"):
        vals[int(pid)].append((float(t), float(v)))
    jumps: dict[int, list] = {i: [] for i in range(len(seeds))}
    for pid, t, s in rows("jumps.csv"):
        jumps[int(pid)].append((float(t), float(s)))
    paths = []
    for i in range(len(seeds)):
        tv = np.array(vals[i])
        jv = np.array(jumps[i]).reshape(-1, 2)
        paths.append(CadlagPath(TimeGrid(tv[:, 0]), tv[:, 1], jv[:, 0], jv[:, 1]))
    return PathEnsemble(grid, tuple(paths), tuple(seeds))
