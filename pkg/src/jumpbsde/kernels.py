"""Finite measures on the mark space, possibly depending on ``(s, x)``.

Every kernel reduces to a quadrature rule: fixed nodes ``e_j`` and weights
``w_j(s, x)`` such that ``integral f(e) kernel(s, x; de) = sum_j w_j f(e_j)``.
Discrete kernels are exact; densities use Gauss-Legendre nodes on a bounded
support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

DEFAULT_QUADRATURE_ORDER = 64


@dataclass(frozen=True, eq=False)
class MarkKernel:
    """``kernel(s, x; de) = scale(s, x) * sum_j base_weights_j delta_{nodes_j}(de)``.

    ``scale`` may return shape ``(n,)`` (a state-dependent total intensity) or
    ``(n, q)`` (node-wise weights, e.g. a rate matrix row). ``density`` and
    ``support`` are kept for densities so that sampling is exact rather than
    drawn from the quadrature nodes.
    """

    nodes: np.ndarray
    base_weights: np.ndarray
    scale: Optional[Callable] = None
    density: Optional[Callable] = None
    support: Optional[tuple[float, float]] = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1)
        w = np.asarray(self.base_weights, dtype=float).reshape(-1)
        if nodes.shape != w.shape:
            raise ValueError("nodes and weights differ in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite and nonnegative")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "base_weights", w)

    # -- constructors --------------------------------------------------------

    @classmethod
    def point(cls, mark: float, mass: float = 1.0) -> "MarkKernel":
        return cls(np.array([mark]), np.array([mass]))

    @classmethod
    def discrete(cls, marks, weights) -> "MarkKernel":
        return cls(np.asarray(marks, dtype=float), np.asarray(weights, dtype=float))

    @classmethod
    def from_density(cls, density: Callable, lower: float, upper: float, order: int = DEFAULT_QUADRATURE_ORDER) -> "MarkKernel":
        """Gauss-Legendre discretization of ``density(e) de`` on ``[lower, upper]``."""
        if not upper > lower:
            raise ValueError("density support must have upper > lower")
        x, w = np.polynomial.legendre.leggauss(order)
        half = 0.5 * (upper - lower)
        nodes = lower + half * (x + 1.0)
        dens = np.asarray(density(nodes), dtype=float)
        return cls(nodes, w * half * dens, density=density, support=(lower, upper))

    def scaled(self, scale: Callable) -> "MarkKernel":
        """Same marks with weights multiplied by ``scale(s, x)``."""
        return MarkKernel(self.nodes, self.base_weights, scale, self.density, self.support)

    def truncated(self, eps: float) -> tuple["MarkKernel", dict]:
        """Drop marks with ``|e| < eps``; also returns the dropped mass and first moment."""
        if eps <= 0:
            return self, {"eps": float(eps), "dropped_mass": 0.0, "dropped_abs_moment": 0.0}
        keep = np.abs(self.nodes) >= eps
        info = {
            "eps": float(eps),
            "dropped_mass": float(self.base_weights[~keep].sum()),
            "dropped_abs_moment": float(np.dot(self.base_weights[~keep], np.abs(self.nodes[~keep]))),
        }
        density = None
        if self.density is not None:
            inner = self.density
            density = lambda e: np.where(np.abs(e) >= eps, inner(e), 0.0)  # noqa: E731
        return MarkKernel(self.nodes[keep], self.base_weights[keep], self.scale, density, self.support), info

    # -- evaluation ----------------------------------------------------------

    @property
    def is_discrete(self) -> bool:
        return self.density is None

    def weights(self, s, x) -> np.ndarray:
        """Weights of shape ``(n, q)`` for times/states of shape ``(n,)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = max(s.size, x.size)
        w = np.broadcast_to(self.base_weights, (n, self.nodes.size))
        if self.scale is None:
            return w
        sc = np.asarray(self.scale(np.broadcast_to(s, (n,)), np.broadcast_to(x, (n,))), dtype=float)
        if sc.ndim <= 1:
            sc = np.broadcast_to(sc.reshape(-1, 1) if sc.ndim == 1 else sc, (n, 1))
        return w * sc

    def mass(self, s, x) -> np.ndarray:
        return self.weights(s, x).sum(axis=1)

    def integrate(self, f: Callable, s, x) -> np.ndarray:
        """``integral f(e) kernel(s, x; de)`` for vectorized ``f(nodes) -> (q,)``."""
        w = self.weights(s, x)
        return w @ np.asarray(f(self.nodes), dtype=float)

    def sample(self, rng: np.random.Generator, s: float, x: float) -> float:
        """One mark from the normalized kernel at ``(s, x)``."""
        if self.is_discrete:
            w = self.weights(s, x)[0]
            total = w.sum()
            if total <= 0:
                raise ValueError("cannot sample from a null kernel")
            return float(self.nodes[rng.choice(w.size, p=w / total)])
        lo, hi = self.support
        # rejection from the uniform envelope; scale factors do not change the shape
        grid = np.linspace(lo, hi, 513)
        bound = 1.05 * max(np.max(self.density(grid)), np.max(self.density(self.nodes)))
        while True:
            e = rng.uniform(lo, hi)
            if rng.uniform(0.0, bound) <= self.density(np.array([e]))[0]:
                return float(e)
