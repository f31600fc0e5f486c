"""Scenario files: a JSON document validated against :data:`SCHEMA`.

A scenario names the forward model and its coefficients (registry entries),
the grid, the ensemble size and seed, the driver, solver settings, the oracle
used for ground truth, and the checks to run with their tolerances. Command
line overrides address fields by dotted path (``grid.steps=400``,
``checks.0.tol=1e-3``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import jsonschema
import numpy as np

from . import registry
from .bsde import DriverSpec, FixedPointError
from .forward import JumpDiffusionSpec, PdmpSpec, PureJumpSpec
from .identify import ValueFunction
from .paths import TimeGrid


class ConfigError(ValueError):
    """Invalid scenario; the message starts with the dotted path of the field."""


_entry = {
    "type": "object",
    "required": ["name"],
    "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
    "additionalProperties": False,
}
_pos = {"type": "number", "exclusiveMinimum": 0}

CHECK_NAMES = (
    "reconcile",
    "terminal_mean",
    "event_sets_empty",
    "all_k",
    "pstar_terminal",
    "compensator_atom_identity",
    "y0_vs_oracle",
    "residual",
    "identify_z",
    "h_atom_rmse",
    "verify_vanishing",
    "k_decomposition",
    "chain_rule_orthogonality",
    "chain_rule_terminal",
    "chain_rule_vs_drift",
    "weak_order",
    "rk4_order",
    "bracket_variance",
)

SCHEMA: dict = {
    "type": "object",
    "required": ["name", "model", "coefficients", "grid", "ensemble"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "model": {"enum": ["jump_diffusion", "pure_jump", "pdmp"]},
        "coefficients": {"type": "object"},
        "grid": {
            "type": "object",
            "required": ["T", "steps"],
            "additionalProperties": False,
            "properties": {"T": _pos, "steps": {"type": "integer", "minimum": 1}},
        },
        "ensemble": {
            "type": "object",
            "required": ["n_paths", "master_seed"],
            "additionalProperties": False,
            "properties": {"n_paths": {"type": "integer", "minimum": 1}, "master_seed": {"type": "integer", "minimum": 0}},
        },
        "driver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "terminal": _entry,
                "f": _entry,
                "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "atoms_in_clock": {"type": "boolean"},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "basis": {"enum": ["poly", "indicator"]},
                "order": {"type": "integer", "minimum": 1},
                "u_order": {"type": ["integer", "null"], "minimum": 0},
                "min_support": {"type": "integer", "minimum": 1},
                "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "fp_tol": _pos,
                "fp_max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "oracle": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "finite_state", "closed_form", "pdmp", "pde"]},
                "params": {"type": "object"},
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "tol"],
                "additionalProperties": False,
                "properties": {"name": {"enum": list(CHECK_NAMES)}, "tol": _pos, "params": {"type": "object"}},
            },
        },
        "converge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "reference_steps": {"type": "integer", "minimum": 2},
                "n_paths": {"type": "integer", "minimum": 2},
                "rk4_steps": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "bracket_levels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
            },
        },
    },
    "allOf": [
        {
            "if": {"properties": {"model": {"const": "jump_diffusion"}}},
            "then": {
                "properties": {
                    "coefficients": {
                        "type": "object",
                        "required": ["b", "sigma", "x0"],
                        "additionalProperties": False,
                        "properties": {
                            "b": _entry,
                            "sigma": _entry,
                            "gamma": {"oneOf": [_entry, {"type": "null"}]},
                            "levy": {"oneOf": [_entry, {"type": "null"}]},
                            "x0": {"type": "number"},
                            "lipschitz_K": _pos,
                            "truncation": {"type": "number", "minimum": 0},
                        },
                    }
                }
            },
        },
        {
            "if": {"properties": {"model": {"const": "pure_jump"}}},
            "then": {
                "properties": {
                    "coefficients": {
                        "type": "object",
                        "required": ["states", "generator", "x0"],
                        "additionalProperties": False,
                        "properties": {
                            "states": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                            "generator": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                            "x0": {"type": "number"},
                        },
                    }
                }
            },
        },
        {
            "if": {"properties": {"model": {"const": "pdmp"}}},
            "then": {
                "properties": {
                    "coefficients": {
                        "type": "object",
                        "required": ["h", "lam", "beta", "x0"],
                        "additionalProperties": False,
                        "properties": {
                            "h": _entry,
                            "lam": _entry,
                            "beta": _entry,
                            "P": {"oneOf": [_entry, {"type": "null"}]},
                            "lam_bound": {"type": "number", "minimum": 0},
                            "x0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                            "substeps": {"type": "integer", "minimum": 1},
                        },
                    }
                }
            },
        },
    ],
}

DEFAULTS = {
    "description": "",
    "driver": {"terminal": {"name": "affine", "params": {"c0": 0.0, "c1": 1.0}}, "f": {"name": "zero", "params": {}}, "eps": 0.1, "atoms_in_clock": True},
    "solver": {"basis": "poly", "order": 2, "u_order": None, "min_support": 5, "theta": 0.8, "fp_tol": 1e-10, "fp_max_iter": 100},
    "oracle": {"kind": "none", "params": {}},
    "checks": [],
    "converge": {"levels": [4, 8, 16, 32], "reference_steps": 1024, "n_paths": 2000, "rk4_steps": [10, 20, 40], "bracket_levels": [64, 128, 256, 512]},
}


def _merge_defaults(doc: dict, defaults: dict) -> dict:
    out = copy.deepcopy(doc)
    for k, v in defaults.items():
        if k not in out:
            out[k] = copy.deepcopy(v)
        elif isinstance(v, dict) and isinstance(out[k], dict) and k != "params":
            for kk, vv in v.items():
                out[k].setdefault(kk, copy.deepcopy(vv))
    return out


def _path_str(path: Iterable) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def validate(doc: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{_path_str(err.absolute_path)}: {err.message}")


@dataclass(frozen=True, eq=False)
class Scenario:
    """A validated scenario document with defaults filled in."""

    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        validate(doc)
        full = _merge_defaults(doc, DEFAULTS)
        validate(full)
        sc = cls(full)
        sc.build_model()
        sc.build_driver()
        return sc

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: Iterable[str]) -> "Scenario":
        return Scenario.from_dict(apply_overrides(self.to_dict(), overrides))

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def name(self) -> str:
        return self.doc["name"]

    @property
    def model(self) -> str:
        return self.doc["model"]

    def grid(self, steps: Optional[int] = None) -> TimeGrid:
        return TimeGrid.uniform(float(self.doc["grid"]["T"]), int(steps or self.doc["grid"]["steps"]))

    # -- builders ------------------------------------------------------------

    def _build(self, table: str, entry, where: str):
        try:
            return registry.build(table, entry)
        except registry.RegistryError as exc:
            raise ConfigError(f"{where}: {exc.args[0]}") from None

    def build_model(self):
        c = self.doc["coefficients"]
        where = "coefficients"
        try:
            if self.model == "jump_diffusion":
                gamma = c.get("gamma")
                levy = c.get("levy")
                spec = JumpDiffusionSpec(
                    b=self._build("function", c["b"], f"{where}.b"),
                    sigma=self._build("function", c["sigma"], f"{where}.sigma"),
                    gamma=None if gamma is None else self._build("jump_map", gamma, f"{where}.gamma"),
                    levy=None if levy is None else self._build("kernel", levy, f"{where}.levy"),
                    x0=float(c["x0"]),
                    lipschitz_K=float(c.get("lipschitz_K", np.inf)),
                    truncation=float(c.get("truncation", 0.0)),
                )
                spec.check()
                return spec
            if self.model == "pure_jump":
                states = np.asarray(c["states"], dtype=float)
                q = np.asarray(c["generator"], dtype=float)
                if q.shape != (states.size, states.size):
                    raise ConfigError(f"{where}.generator: expected a {states.size}x{states.size} matrix")
                if np.any(np.abs(q.sum(axis=1)) > 1e-12) or np.any((q - np.diag(np.diag(q))) < 0):
                    raise ConfigError(f"{where}.generator: rows must sum to 0 with nonnegative off-diagonal rates")
                if not np.any(np.isclose(states, c["x0"])):
                    raise ConfigError(f"{where}.x0: not one of the states")
                return PureJumpSpec.from_generator(states, q, float(c["x0"]))
            P = c.get("P")
            return PdmpSpec(
                h=self._build("function", c["h"], f"{where}.h"),
                lam=self._build("function", c["lam"], f"{where}.lam"),
                beta=self._build("function", c["beta"], f"{where}.beta"),
                x0=float(c["x0"]),
                P=None if P is None else self._build("kernel", P, f"{where}.P"),
                lam_bound=float(c.get("lam_bound", 0.0)),
                substeps=int(c.get("substeps", 1)),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def driver_params(self) -> dict:
        return self._build("driver", self.doc["driver"]["f"], "driver.f")

    def build_driver(self) -> DriverSpec:
        d = self.doc["driver"]
        terminal = self._build("function", d["terminal"], "driver.terminal")
        lin = self.driver_params()
        drv = DriverSpec.linear(terminal, eps=float(d["eps"]), **lin)
        if not d["atoms_in_clock"]:
            drv = DriverSpec(drv.terminal, drv.f, drv.rho, drv.L_y, drv.L_u, drv.L_z, drv.eps, False)
        if self.model == "pdmp":
            # boundary hits are unit atoms of A
            try:
                drv.check_atoms(1.0)
            except FixedPointError as exc:
                raise ConfigError(f"driver.f: {exc}") from None
        return drv

    def build_oracle(self) -> Optional[ValueFunction]:
        """Ground-truth value function named by ``oracle.kind`` (``None`` for ``none``)."""
        from . import oracle

        o = self.doc["oracle"]
        kind, params = o["kind"], o.get("params", {})
        T = float(self.doc["grid"]["T"])
        if kind == "none":
            return None
        if kind == "closed_form":
            v = self._build("function", params["v"], "oracle.params.v")
            dv = self._build("function", params["dv_dx"], "oracle.params.dv_dx") if "dv_dx" in params else None
            slope = float(params.get("time_slope", 0.0))
            return ValueFunction(
                lambda t, x: np.asarray(v(np.asarray(x, dtype=float)), dtype=float) + slope * (T - np.asarray(t, dtype=float)),
                None if dv is None else (lambda t, x: np.asarray(dv(np.asarray(x, dtype=float)), dtype=float) + 0.0 * np.asarray(t, dtype=float)),
                "closed-form",
            )
        if kind == "finite_state":
            if self.model != "pure_jump":
                raise ConfigError("oracle.kind: finite_state needs the pure_jump model")
            c = self.doc["coefficients"]
            states = np.asarray(c["states"], dtype=float)
            order = np.argsort(states)
            q = np.asarray(c["generator"], dtype=float)[np.ix_(order, order)]
            gq = oracle.GeneratorMatrix(q, states[order])
            terminal = self._build("function", self.doc["driver"]["terminal"], "driver.terminal")
            lin = self.driver_params()
            if lin["cz"] != 0.0:
                raise ConfigError("driver.f: the finite-state oracle has no Z argument")
            fv = oracle.FiniteStateValue(gq, terminal(gq.states), T, int(params.get("nodes", 1024)), c0=lin["c0"], cx=lin["cx"], a=lin["a"], cu=lin["cu"])
            return ValueFunction(fv, None, "oracle")
        if kind == "pdmp":
            c = self.doc["coefficients"]
            h = self._build("function", c["h"], "coefficients.h")
            beta = self._build("function", c["beta"], "coefficients.beta")
            terminal = self._build("function", self.doc["driver"]["terminal"], "driver.terminal")
            lin = self.driver_params()

            def f(s, x, y):
                return lin["c0"] + lin["cx"] * x + lin["a"] * y

            v = oracle.pdmp_deterministic_v(lambda x: float(h(x)), lambda b: float(beta(b)), lambda x: float(terminal(x)), T, f)
            return ValueFunction(v, None, "oracle")
        # pde
        c = self.doc["coefficients"]
        tab = oracle.pde_reference_v(
            self._build("function", c["b"], "coefficients.b"),
            self._build("function", c["sigma"], "coefficients.sigma"),
            self._build("function", self.doc["driver"]["terminal"], "driver.terminal"),
            float(params.get("lower", -8.0)),
            float(params.get("upper", 8.0)),
            int(params.get("nx", 800)),
            T,
            int(params.get("nt", 400)),
        )
        return ValueFunction(tab, tab.dv_dx, "oracle")


# -- overrides and files -----------------------------------------------------


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``key.path=value`` strings; values are JSON when they parse as JSON."""
    out = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: overrides take the form key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for i, p in enumerate(parts[:-1]):
            if isinstance(node, list):
                if not p.isdigit() or int(p) >= len(node):
                    raise ConfigError(f"{'.'.join(parts[: i + 1])}: no such list entry")
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            if not last.isdigit() or int(last) >= len(node):
                raise ConfigError(f"{key}: no such list entry")
            node[int(last)] = _parse_value(raw)
        else:
            node[last] = _parse_value(raw)
    return out


def load_scenario(path, overrides: Iterable[str] = ()) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"<file>: {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: {path} is not valid JSON ({exc})") from None
    return Scenario.from_dict(apply_overrides(doc, overrides))


def builtin_scenarios() -> dict[str, Path]:
    d = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(d.glob("*.json"))}


def resolve_config(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    builtin = builtin_scenarios()
    if name_or_path in builtin:
        return builtin[name_or_path]
    raise ConfigError(f"<file>: {name_or_path} is neither a file nor a built-in scenario ({', '.join(builtin)})")
