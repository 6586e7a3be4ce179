"""Command line entry point: ``hkfncs {run,monte-carlo,hgmm-sweep,verify}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
Relative ``--out`` paths (and default output names) are placed under
``$HKFNCS_OUT_DIR`` when that variable is set.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

from .config import load_scenario
from .experiments import SWEEP_COLUMNS, fault_injection, hgmm_sweep, monte_carlo, verify
from .model import ConfigurationError
from .ncs import run_closed_loop
from .records import jsonable, trace_csv, trace_records

OUT_DIR_ENV = "HKFNCS_OUT_DIR"
DEFAULT_ALPHAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _out_path(arg: str | None, default: str) -> Path:
    path = Path(arg or default)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _alphas(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(a) for a in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hkfncs", description="HKF networked control simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")
        sp.add_argument("--out", default=None, help=f"output file (default {out_default})")

    sp = sub.add_parser("run", help="single closed-loop trace as CSV")
    common(sp, "trace.csv")
    sp.add_argument("--run-index", type=int, default=0)

    sp = sub.add_parser("monte-carlo", help="summary statistics over many runs as JSON")
    common(sp, "summary.json")
    sp.add_argument("--runs", type=int, default=1000)
    sp.add_argument("--parallel", type=int, default=1, help="worker processes")

    sp = sub.add_parser("hgmm-sweep", help="MSE versus HGMM scale as CSV")
    common(sp, "sweep.csv")
    sp.add_argument("--runs", type=int, default=2000)
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--alphas", type=_alphas, default=DEFAULT_ALPHAS, help="comma-separated scales")

    sp = sub.add_parser("verify", help="oracle equivalence suite")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--runs", type=int, default=2)
    sp.add_argument("--out", default=None, help="optional JSON report")
    sp.add_argument("--horizon-cap", type=int, default=40)
    sp.add_argument("--inject-fault", choices=["delta"], default=None, help="test hook")
    return p


def _cmd_run(args, scenario) -> int:
    res = run_closed_loop(scenario, [args.run_index], args.seed)
    path = _out_path(args.out, "trace.csv")
    path.write_text(trace_csv(trace_records(res)))
    print(f"wrote {scenario.horizon} steps to {path}")
    return 0


def _cmd_monte_carlo(args, scenario) -> int:
    summary = monte_carlo(scenario, args.runs, args.seed, parallel=args.parallel)
    path = _out_path(args.out, "summary.json")
    path.write_text(json.dumps(jsonable(summary), indent=2) + "\n")
    mse = summary["mse"]
    print(f"{args.runs} runs: mse {mse['mean']:.6g} +/- {mse['stderr']:.2g}; wrote {path}")
    return 0


def _cmd_sweep(args, scenario) -> int:
    rows = hgmm_sweep(scenario, args.alphas, args.runs, args.seed, parallel=args.parallel)
    path = _out_path(args.out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for row in rows:
        print(f"alpha {row['alpha']:g}: mse {row['mse']:.6g} [{row['ci_low']:.6g}, {row['ci_high']:.6g}]")
    return 0


def _cmd_verify(args, scenario) -> int:
    hook = fault_injection(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with hook:
        results = verify(scenario, runs=args.runs, seed=args.seed, horizon_cap=args.horizon_cap)
    width = max(len(r.name) for r in results)
    for r in results:
        if r.checked == 0:
            print(f"{r.name:<{width}}  SKIP  ({r.note})")
        else:
            status = "PASS" if r.passed else "FAIL"
            print(f"{r.name:<{width}}  {status}  worst {r.worst:.3e}  tol {r.tolerance:.0e}  n={r.checked}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        report = [{"identity": r.name, "worst": r.worst, "tolerance": r.tolerance, "checked": r.checked,
                   "passed": r.passed, "note": r.note} for r in results]
        _out_path(args.out, "verify.json").write_text(json.dumps(jsonable(report), indent=2) + "\n")
    if failed:
        print("verification failed: " + ", ".join(failed))
        return 1
    print("all identities hold")
    return 0


COMMANDS = {"run": _cmd_run, "monte-carlo": _cmd_monte_carlo, "hgmm-sweep": _cmd_sweep, "verify": _cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.config)
        if getattr(args, "runs", 1) < 1:
            raise ConfigurationError("--runs", "must be at least 1")
        return COMMANDS[args.command](args, scenario)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
