"""Named closed-form coefficient families, so that scenarios stay pure data.

Each entry maps a parameter dict to a vectorized callable. Unknown names and
missing or unexpected parameters raise :class:`RegistryError` with the name
of the offending family.
"""

from __future__ import annotations

import inspect
from typing import Callable

import numpy as np

from .kernels import MarkKernel


class RegistryError(KeyError):
    pass


def _arr(x):
    return np.asarray(x, dtype=float)


# -- functions of x ----------------------------------------------------------


def _constant(value: float = 0.0):
    return lambda x: np.full(np.shape(x), float(value))


def _affine(c0: float = 0.0, c1: float = 1.0):
    return lambda x: c0 + c1 * _arr(x)


def _polynomial(coeffs=(0.0, 1.0)):
    c = np.asarray(coeffs, dtype=float)
    return lambda x: np.polynomial.polynomial.polyval(_arr(x), c)


def _trig(a: float = 0.0, b: float = 1.0, omega: float = 1.0, phase: float = 0.0):
    return lambda x: a + b * np.sin(omega * _arr(x) + phase)


def _gaussian(scale: float = 1.0, height: float = 1.0):
    return lambda x: height * np.exp(-_arr(x) ** 2 / (2.0 * scale**2))


def _piecewise_linear(xs, ys):
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.size < 2 or xs.shape != ys.shape or not np.all(np.diff(xs) > 0):
        raise RegistryError("piecewise_linear needs matching, strictly increasing knots")
    return lambda x: np.interp(_arr(x), xs, ys)


FUNCTIONS: dict[str, Callable] = {
    "constant": _constant,
    "affine": _affine,
    "polynomial": _polynomial,
    "trig": _trig,
    "gaussian": _gaussian,
    "piecewise_linear": _piecewise_linear,
}


# -- jump maps gamma(x, e) ---------------------------------------------------


def _mark(scale: float = 1.0):
    return lambda x, e: scale * _arr(e) + 0.0 * _arr(x)


def _damped_mark(scale: float = 1.0):
    """``scale * e / (1 + x^2)``: bounded and Lipschitz in ``x`` (constant ``scale * 0.65``)."""
    return lambda x, e: scale * _arr(e) / (1.0 + _arr(x) ** 2)


JUMP_MAPS: dict[str, Callable] = {"mark": _mark, "damped_mark": _damped_mark}


# -- mark kernels ------------------------------------------------------------


def _point(mark: float = 1.0, rate: float = 1.0):
    return MarkKernel.point(mark, rate)


def _discrete(marks, weights):
    return MarkKernel.discrete(marks, weights)


def _uniform(lower: float = 0.0, upper: float = 1.0, rate: float = 1.0):
    dens = rate / (upper - lower)
    return MarkKernel.from_density(lambda e: np.full(np.shape(e), dens), lower, upper)


def _normal(mean: float = 0.0, sd: float = 1.0, rate: float = 1.0, width: float = 8.0):
    c = rate / (sd * np.sqrt(2 * np.pi))
    return MarkKernel.from_density(lambda e: c * np.exp(-((_arr(e) - mean) ** 2) / (2 * sd**2)), mean - width * sd, mean + width * sd)


def _power_law(alpha: float = 0.5, c: float = 1.0, upper: float = 1.0, floor: float = 1e-3):
    """``c |e|^(-1-alpha)`` on ``[floor, upper]``; combine with a truncation ``eps >= floor``."""
    return MarkKernel.from_density(lambda e: c * np.abs(_arr(e)) ** (-1.0 - alpha), floor, upper)


KERNELS: dict[str, Callable] = {
    "point": _point,
    "discrete": _discrete,
    "uniform": _uniform,
    "normal": _normal,
    "power_law": _power_law,
}


# -- drivers and terminal conditions share FUNCTIONS; f comes from here ------


def _linear_driver(c0: float = 0.0, cx: float = 0.0, a: float = 0.0, cz: float = 0.0, cu: float = 0.0):
    return {"c0": c0, "cx": cx, "a": a, "cz": cz, "cu": cu}


DRIVERS: dict[str, Callable] = {"zero": lambda: _linear_driver(), "linear": _linear_driver}


TABLES = {"function": FUNCTIONS, "jump_map": JUMP_MAPS, "kernel": KERNELS, "driver": DRIVERS}


def names(table: str) -> list[str]:
    return sorted(TABLES[table])


def build(table: str, entry: dict):
    """Instantiate ``{"name": ..., "params": {...}}`` from ``table``."""
    reg = TABLES[table]
    name = entry.get("name")
    if name not in reg:
        raise RegistryError(f"unknown {table} {name!r}; known: {', '.join(sorted(reg))}")
    params = dict(entry.get("params", {}))
    sig = inspect.signature(reg[name])
    extra = set(params) - set(sig.parameters)
    if extra:
        raise RegistryError(f"{table} {name!r} does not take {sorted(extra)}")
    try:
        sig.bind(**params)
    except TypeError as exc:
        raise RegistryError(f"{table} {name!r}: {exc}") from None
    return reg[name](**params)
