"""``jumpbsde <simulate|solve|identify|converge|oracle> --config <path> [--set key=value ...] [--out dir]``

Exit status: 0 when every configured check of the command passes, 1 when a
check fails, 2 for configuration errors, 3 when the numerics break down.
The worker count comes from ``JUMPBSDE_WORKERS`` (default 1); results do not
depend on it.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from . import report
from .bsde import SolverError
from .config import ConfigError, builtin_scenarios, load_scenario, resolve_config
from .forward import SimulationError
from .measure import MeasureError
from .oracle import OracleError
from .runner import NumericsError, Run, cmd_converge, cmd_identify, cmd_oracle, cmd_simulate, cmd_solve

log = logging.getLogger("jumpbsde")

COMMANDS = ("simulate", "solve", "identify", "converge", "oracle")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICS = 0, 1, 2, 3
# numerical breakdowns; caught before the generic ValueError/KeyError (config) branch
NUMERICS_ERRORS = (NumericsError, SimulationError, SolverError, MeasureError, OracleError)


def _workers() -> int:
    raw = os.environ.get("JUMPBSDE_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"JUMPBSDE_WORKERS: {raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("JUMPBSDE_WORKERS: must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpbsde", description="Simulate, solve and verify BSDEs driven by random measures.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help=f"scenario file or built-in name ({', '.join(builtin_scenarios())})")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config field; repeatable")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config: str, overrides=(), out="out") -> int:
    """Programmatic entry point; returns the exit code."""
    try:
        scenario = load_scenario(resolve_config(config), overrides)
        workers = _workers()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scenario.json").write_text(scenario.dumps())
    r = Run(scenario, workers)
    plot = None
    try:
        if command == "simulate":
            checks = cmd_simulate(r, out_dir)
        elif command == "solve":
            checks = cmd_solve(r, out_dir)
        elif command == "identify":
            checks = cmd_identify(r, out_dir)
        elif command == "converge":
            checks, plot = cmd_converge(r, out_dir)
        else:
            payload = cmd_oracle(r, out_dir)
            log.info("v(0, x0) = %r", payload["v0"])
            checks = []
    except NUMERICS_ERRORS as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report.report_render(checks, out_dir, "report", plot)
    for c in checks:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['check_name']} statistic={report.fmt(c['statistic'])} tolerance={report.fmt(c['tolerance'])}")
    return EXIT_OK if all(c["pass"] for c in checks) else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("default")
    return run(args.command, args.config, args.overrides, args.out)


if __name__ == "__main__":
    sys.exit(main())
