"""Command-line entry point: ``mcuapa <command> [--config PATH] ...``.

Exit codes: 0 success, 2 infeasible instance, 3 solver failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import bench
from .errors import InfeasibleGeometryError, InfeasibleInstanceError, SolverFailure

EXIT_OK, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4

COMMANDS = {
    "solve": "solve",
    "pareto": "pareto",
    "montecarlo": "montecarlo",
    "assoc-sweep": "assoc_sweep",
    "coverage-sweep": "coverage_sweep",
}


def write_csv(path, kind, header, rows) -> None:
    """CSV with a ``# schema: <name/version>`` first line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {bench.SCHEMAS[kind]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcuapa", description=(
        "Joint multi-connectivity user association and power allocation experiments."))
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI experiment config (defaults otherwise)")
        p.add_argument("--seed", type=int, help="override [scenario] seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--trace", action="store_true",
                       help="write the per-iteration CCP trace (solve only)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # start-point QoS warnings are expected in sweeps; show them with -v only
    logging.captureWarnings(True)
    if not args.verbose:
        logging.getLogger("py.warnings").setLevel(logging.ERROR)
    kind = COMMANDS[args.command]
    try:
        cfg = bench.load_config(args.config) if args.config else bench.ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        bench.validate(cfg)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)

    try:
        if kind == "solve":
            trace = args.out / "trace.csv" if args.trace else None
            doc = bench.cmd_solve(cfg, trace_path=trace)
            with open(args.out / "solve.json", "w") as fh:
                json.dump(doc, fh, indent=2)
                fh.write("\n")
            if doc["status"] != "ok":
                print(f"infeasible: {doc['reason']}", file=sys.stderr)
                return EXIT_INFEASIBLE
            print(f"total rate {doc['total_rate_bps']:.6g} bit/s, "
                  f"QoS {'met' if doc['qos_met'] else 'not met'}")
            return EXIT_OK
        fn = getattr(bench, f"cmd_{kind}")
        header, rows, *_ = fn(cfg)
        path = args.out / f"{kind}.csv"
        write_csv(path, kind, header, rows)
        print(f"wrote {len(rows)} rows to {path}")
        return EXIT_OK
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleGeometryError, InfeasibleInstanceError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
