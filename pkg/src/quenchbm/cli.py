"""Command line front end.

One subcommand per experiment kind plus ``report``. Each experiment run
writes ``config.json``, ``metrics.csv``, ``plotdata.csv`` and parameter
snapshots into the output directory; ``report`` turns a finished run's
``plotdata.csv`` into PNG figures next to the delimited files.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from .harness import EXPERIMENT_KINDS, ExperimentConfig, config_hash, run_experiment

USAGE_KINDS = ", ".join(EXPERIMENT_KINDS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quenchbm",
        description="exact-diagonalization experiments for quench-trained "
                    "quantum Boltzmann machines")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON experiment document to start from")
        p.add_argument("--out", help="output directory (default: ./<kind>-<hash>)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int, help="worker thread budget")
        p.add_argument("--backend", help="quench arm backend override")
        p.add_argument("--instances", type=int, help="instance count override")
        p.add_argument("--sizes", help="comma separated visible-unit counts")
    rep = sub.add_parser("report", help="render figures for a finished run")
    rep.add_argument("run_dir", help="directory holding plotdata.csv + config.json")
    rep.add_argument("--out", help="directory for PNGs (default: the run directory)")
    return parser


def config_from_args(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        # accept either a bare document or a run's config.json echo
        doc = dict(loaded.get("config", loaded))
    doc["kind"] = args.command
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    if args.backend is not None:
        doc["backend"] = args.backend
    if args.instances is not None:
        doc["instances"] = args.instances
    if args.sizes is not None:
        doc["n_visible"] = [int(tok) for tok in args.sizes.split(",") if tok]
    return ExperimentConfig.from_document(doc)


def _print_aggregates(record) -> None:
    width = max((len(p.series) for p in record.aggregates), default=0)
    for p in record.aggregates:
        x = "-" if math.isnan(p.x) else f"{p.x:g}"
        print(f"  {p.series:<{width}}  x={x:<6} mean={p.y:.6g}  se={p.yerr:.3g}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        from .report import render_run

        for path in render_run(args.run_dir, args.out):
            print(path)
        return 0
    config = config_from_args(args)
    out_dir = args.out or f"{config.kind}-{config_hash(config)[:12]}"
    record = run_experiment(config, out_dir=out_dir)
    print(f"wrote {out_dir} ({len(record.rows)} metric rows, "
          f"{len(record.failures)} failures)")
    _print_aggregates(record)
    return 1 if record.failures else 0


if __name__ == "__main__":
    sys.exit(main())
