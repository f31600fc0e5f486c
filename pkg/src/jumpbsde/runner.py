"""Experiment orchestration behind the command line.

A :class:`Run` lazily simulates the ensemble, solves the backward equation
and builds the oracle value function, each at most once. Checks are looked
up by name in :data:`CHECKS`; every check returns a
:class:`~jumpbsde.identify.CheckResult`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import converge, report
from .bsde import residual_check, solve_regression
from .config import Scenario
from .forward import ForwardEnsemble, reconcile, simulate_ensemble
from .identify import (
    CheckResult,
    chain_rule_remainder,
    compute_h,
    driver_drift,
    h_atom_rmse,
    h_atom_table,
    identify_z,
    k_decomposition,
    verify_vanishing,
)
from .measure import classify_events
from .oracle import OracleCache, scenario_hash
from .paths import save_ensemble, write_ensemble_csv

STAGES = ("simulate", "solve", "identify")


class NumericsError(RuntimeError):
    """Non-finite numbers in a result; the message says where."""


def _require_finite(arr, where: str) -> None:
    a = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0].tolist()
        raise NumericsError(f"{where}: non-finite value at index {bad}")


@dataclass
class Run:
    scenario: Scenario
    workers: int = 1
    rate_tables: dict = field(default_factory=dict)

    @functools.cached_property
    def spec(self):
        return self.scenario.build_model()

    @functools.cached_property
    def driver(self):
        return self.scenario.build_driver()

    @functools.cached_property
    def grid(self):
        return self.scenario.grid()

    @functools.cached_property
    def ensemble(self) -> ForwardEnsemble:
        e = self.scenario["ensemble"]
        ens = simulate_ensemble(self.spec, self.grid, int(e["n_paths"]), int(e["master_seed"]), self.workers)
        _require_finite(ens.values(), "forward paths")
        return ens

    @functools.cached_property
    def solution(self):
        s = dict(self.scenario["solver"])
        states = None
        if self.scenario.model == "pure_jump":
            states = np.sort(np.asarray(self.scenario["coefficients"]["states"], dtype=float))
        sol = solve_regression(
            self.ensemble,
            self.driver,
            basis=s["basis"],
            order=s["order"],
            states=states,
            theta=s["theta"],
            fp_tol=s["fp_tol"],
            fp_max_iter=s["fp_max_iter"],
            min_support=s["min_support"],
            u_order=s["u_order"],
        )
        _require_finite(sol.y, "solution Y")
        if sol.z is not None:
            _require_finite(sol.z, "solution Z")
        return sol

    @functools.cached_property
    def value(self):
        v = self.scenario.build_oracle()
        if v is None:
            raise ValueError(f"{self.scenario.name}: this check needs an oracle (oracle.kind is none)")
        return v

    @property
    def x0(self) -> float:
        return float(self.scenario["coefficients"]["x0"])

    @property
    def horizon(self) -> float:
        return float(self.scenario["grid"]["T"])

    @functools.cached_property
    def h_field(self):
        return compute_h(self.solution, self.value, self.ensemble[0].gamma_tilde)

    @functools.cached_property
    def remainder(self):
        return chain_rule_remainder(self.value, self.ensemble)


# -- checks ------------------------------------------------------------------


def _reconcile(run: Run, tol, params) -> CheckResult:
    n = sum(len(reconcile(r).violations) for r in run.ensemble)
    return CheckResult("reconcile", float(n), tol, n == 0)


def _terminal_mean(run: Run, tol, params) -> CheckResult:
    xt = run.ensemble.values()[:, -1]
    expected = float(params.get("expected", run.x0))
    se = float(xt.std(ddof=1) / math.sqrt(xt.size)) if xt.size > 1 else 0.0
    gap = abs(float(xt.mean()) - expected)
    return CheckResult("terminal_mean", gap, tol, gap <= 3 * se + tol, {"mean": float(xt.mean()), "stderr": se, "expected": expected})


def _event_sets_empty(run: Run, tol, params) -> CheckResult:
    n = 0
    for r in run.ensemble:
        ev = classify_events(r.mu, r.nu)
        n += ev.J.size + ev.K.size
    return CheckResult("event_sets_empty", float(n), tol, n == 0)


def _all_k(run: Run, tol, params) -> CheckResult:
    bad = total = 0
    for r in run.ensemble:
        ev = classify_events(r.mu, r.nu)
        total += ev.D.size
        bad += int(np.sum(~np.isin(ev.D, ev.K))) + sum(t != "boundary" for t in r.tags)
    return CheckResult("all_k", float(bad), tol, bad == 0 and total > 0, {"n_atoms": total})


def _pstar_terminal(run: Run, tol, params) -> CheckResult:
    expected = float(params["expected"])
    vals = np.array([r.aux["pstar"].terminal for r in run.ensemble])
    dev = float(np.max(np.abs(vals - expected)))
    return CheckResult("pstar_terminal", dev, tol, dev == 0.0, {"expected": expected})


def _atom_identity(run: Run, tol, params) -> CheckResult:
    """At every compensator atom: one mu-atom at the same time, unit mass, same mark."""
    bad = 0
    for r in run.ensemble:
        times = dict(zip(r.mu.times.tolist(), r.mu.marks.tolist()))
        for a in r.nu.atoms:
            ok = a.time in times and a.marks.size == 1 and a.weights[0] == 1.0 and a.marks[0] == times[a.time]
            bad += not ok
    return CheckResult("compensator_atom_identity", float(bad), tol, bad == 0)


def _y0_vs_oracle(run: Run, tol, params) -> CheckResult:
    sol = run.solution
    ref = float(run.value(0.0, run.x0))
    gap = abs(sol.y0 - ref)
    return CheckResult("y0_vs_oracle", gap, tol, gap <= 3 * sol.stderr + tol, {"y0": sol.y0, "stderr": sol.stderr, "oracle": ref})


def _residual(run: Run, tol, params) -> CheckResult:
    rep = residual_check(run.solution, run.ensemble, run.driver, tol=float(params.get("per_path_tol", 10 * tol)))
    return CheckResult("residual", rep.mean, tol, rep.mean <= tol, {"max": float(rep.per_path.max()), "flagged": int(rep.flagged.size)})


def _identify_z(run: Run, tol, params) -> CheckResult:
    if run.scenario.model != "jump_diffusion":
        raise ValueError("identify_z needs the jump_diffusion model")
    sigma = run.spec.sigma
    return identify_z(run.value, run.solution, run.ensemble, lambda t, x: sigma(x), tol)


def _h_atom_rmse(run: Run, tol, params) -> CheckResult:
    r = h_atom_rmse(run.h_field, run.ensemble)
    return CheckResult("h_atom_rmse", r.statistic, tol, r.statistic < tol, r.extra)


def _verify_vanishing(run: Run, tol, params) -> CheckResult:
    return verify_vanishing(run.h_field, run.ensemble, tol)


def _k_decomposition(run: Run, tol, params) -> CheckResult:
    kd = k_decomposition(run.h_field, run.ensemble)
    on_tol = float(params.get("on_k_tol", 0.0))
    ok = kd.off_k_l2 < tol and kd.on_k_residual <= on_tol
    ls = [d["l"] for d in kd.l_fit]
    return CheckResult(
        "k_decomposition",
        kd.off_k_l2,
        tol,
        ok,
        {"on_k_residual": kd.on_k_residual, "n_k_times": len(ls), "l_mean": float(np.mean(ls)) if ls else 0.0},
    )


def _cr_orth(run: Run, tol, params) -> CheckResult:
    o = run.remainder.orthogonality
    stat = abs(o.mean) / o.stderr if o.stderr > 0 else (0.0 if o.mean == 0 else math.inf)
    return CheckResult("chain_rule_orthogonality", stat, tol, bool(o.passed), {"mean": o.mean, "stderr": o.stderr})


def _cr_terminal(run: Run, tol, params) -> CheckResult:
    a = run.remainder.terminal
    expected = float(params.get("expected", 0.0))
    se = float(a.std(ddof=1) / math.sqrt(a.size))
    gap = abs(float(a.mean()) - expected)
    return CheckResult("chain_rule_terminal", gap, tol, gap <= 3 * se + tol, {"mean": float(a.mean()), "stderr": se, "expected": expected})


def _cr_vs_drift(run: Run, tol, params) -> CheckResult:
    dd = driver_drift(run.value, run.driver, run.ensemble)
    err = float(np.max(np.abs(run.remainder.remainder - dd)))
    return CheckResult("chain_rule_vs_drift", err, tol, err < tol)


def _weak_order(run: Run, tol, params) -> CheckResult:
    """``tol`` is the smallest acceptable error ratio per halving of the step."""
    t = run.rate_tables["weak"]
    worst = min(t.ratios)
    return CheckResult("weak_order", worst, tol, worst >= tol, {"ratios": t.ratios, "errors": t.error, "stderr": t.stderr})


def _rk4_order(run: Run, tol, params) -> CheckResult:
    t = run.rate_tables["rk4"]
    target = float(params.get("target_ratio", 16.0))
    dev = max(abs(math.log2(r) - math.log2(target)) for r in t.ratios)
    return CheckResult("rk4_order", dev, tol, dev < tol, {"ratios": t.ratios, "target_ratio": target})


def _bracket_variance(run: Run, tol, params) -> CheckResult:
    t = run.rate_tables["bracket"]
    # variance proportional to dt: each halving halves it (ratio 2, log2 ratio 1)
    dev = max(abs(math.log2(r) - 1.0) for r in t.ratios)
    means = np.array(t.extra["means"])
    mean_ok = bool(np.all(np.abs(means - run.horizon) <= 5 * np.sqrt(np.array(t.error) / run.scenario["converge"]["n_paths"])))
    return CheckResult("bracket_variance", dev, tol, dev < tol and mean_ok, {"ratios": t.ratios, "means": t.extra["means"]})


@dataclass(frozen=True)
class CheckDef:
    fn: Callable
    stage: str


CHECKS: dict[str, CheckDef] = {
    "reconcile": CheckDef(_reconcile, "simulate"),
    "terminal_mean": CheckDef(_terminal_mean, "simulate"),
    "event_sets_empty": CheckDef(_event_sets_empty, "simulate"),
    "all_k": CheckDef(_all_k, "simulate"),
    "pstar_terminal": CheckDef(_pstar_terminal, "simulate"),
    "compensator_atom_identity": CheckDef(_atom_identity, "simulate"),
    "y0_vs_oracle": CheckDef(_y0_vs_oracle, "solve"),
    "residual": CheckDef(_residual, "solve"),
    "identify_z": CheckDef(_identify_z, "identify"),
    "h_atom_rmse": CheckDef(_h_atom_rmse, "identify"),
    "verify_vanishing": CheckDef(_verify_vanishing, "identify"),
    "k_decomposition": CheckDef(_k_decomposition, "identify"),
    "chain_rule_orthogonality": CheckDef(_cr_orth, "identify"),
    "chain_rule_terminal": CheckDef(_cr_terminal, "identify"),
    "chain_rule_vs_drift": CheckDef(_cr_vs_drift, "identify"),
    "weak_order": CheckDef(_weak_order, "converge"),
    "rk4_order": CheckDef(_rk4_order, "converge"),
    "bracket_variance": CheckDef(_bracket_variance, "converge"),
}


def run_checks(run: Run, stages) -> list[dict]:
    out = []
    for c in run.scenario["checks"]:
        d = CHECKS[c["name"]]
        if d.stage not in stages:
            continue
        res = d.fn(run, float(c["tol"]), c.get("params", {}))
        if math.isnan(res.statistic):
            raise NumericsError(f"check {c['name']}: statistic is NaN")
        out.append(res.as_dict())
    return out


# -- commands ----------------------------------------------------------------


def cmd_simulate(run: Run, out: Path) -> list[dict]:
    ens = run.ensemble
    save_ensemble(ens.paths(), out / "ensemble.npz")
    write_ensemble_csv(ens.paths(), out / "ensemble_csv")
    events = []
    for i, r in enumerate(ens):
        for (s, e), tag in zip(r.mu.atoms, r.tags):
            events.append({"path": i, "time": s, "mark": e, "tag": tag})
    report.write_table(events, ("path", "time", "mark", "tag"), out / "events.csv")
    xt = ens.values()[:, -1]
    report.write_json(
        {
            "scenario": run.scenario.name,
            "n_paths": len(ens),
            "n_events": len(events),
            "terminal_mean": float(xt.mean()),
            "terminal_stderr": float(xt.std(ddof=1) / math.sqrt(xt.size)) if xt.size > 1 else 0.0,
        },
        out / "simulate_summary.json",
    )
    return run_checks(run, ("simulate",))


def cmd_solve(run: Run, out: Path) -> list[dict]:
    checks = cmd_simulate(run, out)
    sol = run.solution
    np.savez(out / "solution.npz", grid=sol.grid.points, y=sol.y, z=sol.z if sol.z is not None else np.empty(0))
    rows = [{"time": t, "y_mean": m, "y_sd": s} for t, m, s in zip(sol.grid.points, sol.y.mean(axis=0), sol.y.std(axis=0))]
    report.write_table(rows, ("time", "y_mean", "y_sd"), out / "solution_mean.csv")
    summary = sol.summary()
    summary["scenario"] = run.scenario.name
    report.write_json(summary, out / "solution_summary.json")
    return checks + run_checks(run, ("solve",))


def cmd_identify(run: Run, out: Path) -> list[dict]:
    checks = cmd_solve(run, out) if _needs_solution(run) else cmd_simulate(run, out)
    checks += run_checks(run, ("identify",))
    if _needs_solution(run):
        report.write_table(h_atom_table(run.h_field, run.ensemble), report.H_COLUMNS, out / "h_atoms.csv")
    return checks


def _needs_solution(run: Run) -> bool:
    names = {c["name"] for c in run.scenario["checks"]}
    return bool(names & {"y0_vs_oracle", "residual", "identify_z", "h_atom_rmse", "verify_vanishing", "k_decomposition"})


def rate_tables(run: Run) -> dict:
    sc = run.scenario
    cfg = sc["converge"]
    names = {c["name"] for c in sc["checks"]}
    tables = {}
    if "weak_order" in names:
        if sc.model != "jump_diffusion":
            raise ValueError("weak_order needs the jump_diffusion model")
        tables["weak"] = converge.weak_error_study(run.spec, run.driver.terminal, run.horizon, cfg["levels"], cfg["reference_steps"], cfg["n_paths"], sc["ensemble"]["master_seed"])
    if "rk4_order" in names:
        if sc.model != "pure_jump":
            raise ValueError("rk4_order needs the pure_jump model")
        tables["rk4"] = converge.rk4_order_study(run.spec, run.driver, run.horizon, cfg["rk4_steps"], sc.driver_params())
    if "bracket_variance" in names:
        tables["bracket"] = converge.bracket_variance_study(run.horizon, cfg["bracket_levels"], cfg["n_paths"], sc["ensemble"]["master_seed"])
    return tables


def cmd_converge(run: Run, out: Path) -> tuple[list[dict], dict]:
    run.rate_tables = rate_tables(run)
    rows = [row for t in run.rate_tables.values() for row in t.rows()]
    report.write_table(rows, ("quantity", "steps", "error", "stderr", "ratio"), out / "rates.csv")
    report.write_json({k: {"steps": t.steps, "error": t.error, "stderr": t.stderr, "ratios": t.ratios, "extra": t.extra} for k, t in run.rate_tables.items()}, out / "rates.json")
    plot = {
        "series": {t.quantity: (t.steps, [abs(e) for e in t.error]) for t in run.rate_tables.values()},
        "title": f"{run.scenario.name}: error against steps",
        "logx": True,
        "logy": True,
    }
    return run_checks(run, ("converge",)), plot


def oracle_payload(run: Run) -> dict:
    sc = run.scenario
    v = run.value
    grid = run.grid
    if sc.model == "pure_jump":
        xs = np.sort(np.asarray(sc["coefficients"]["states"], dtype=float))
    elif sc.model == "pdmp":
        xs = np.linspace(0.05, 0.95, 19)
    else:
        xs = run.x0 + np.linspace(-2.0, 2.0, 21)
    ts = grid.points[:: max(1, grid.steps // 10)]
    table = [[float(v(t, x)) for x in xs] for t in ts]
    _require_finite(table, "oracle table")
    return {"v0": float(v(0.0, run.x0)), "times": ts.tolist(), "states": xs.tolist(), "table": table, "provenance": v.provenance}


def cache_key(sc: Scenario) -> dict:
    d = sc.to_dict()
    return {k: d[k] for k in ("model", "coefficients", "grid", "driver", "oracle")}


def cmd_oracle(run: Run, out: Path, cache_dir: Optional[Path] = None) -> dict:
    cache = OracleCache(cache_dir or out / "oracle_cache")
    payload = cache.get_or_compute(cache_key(run.scenario), lambda: oracle_payload(run))
    payload = dict(payload, scenario=run.scenario.name, key=scenario_hash(cache_key(run.scenario)))
    report.write_json(payload, out / "oracle.json")
    return payload
