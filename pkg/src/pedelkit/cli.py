"""Command line entry point: ``pedelkit run|sweep|lower-bound``.

Exit status is 0 on completion and 2 on any contract error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .harness import ExperimentConfig, LEARNERS, SWEEP_AXES, dumps, lower_bound_report, run_campaign, sweep
from .mdp_core import ContractError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedelkit", description="Policy identification experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--env", help="preset override, e.g. hard:d=8,Delta=5e-6 or chain:S=4,H=3")
        sp.add_argument("--regmin", choices=LEARNERS, help="regret minimizer")
        sp.add_argument("--constant-scale", type=float, help="override constant_scale")
        sp.add_argument("--out", help="output directory")

    run = sub.add_parser("run", help="run one campaign")
    common(run)
    sw = sub.add_parser("sweep", help="run a campaign per axis value")
    common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    lb = sub.add_parser("lower-bound", help="closed-form and numeric lower bounds")
    lb.add_argument("--d", type=int, required=True)
    lb.add_argument("--delta", type=float, required=True)
    lb.add_argument("--Delta", type=float, required=True)
    lb.add_argument("--zeta", type=float)
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    over = {}
    if args.env:
        over["env"] = args.env
    if args.regmin:
        over["regmin"] = args.regmin
    if args.constant_scale is not None:
        over["constant_scale"] = args.constant_scale
    if args.out:
        over["output_dir"] = args.out
    return replace(cfg, **over) if over else cfg


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            out = run_campaign(_load(args))
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            out = {"rows": sweep(_load(args), args.axis, values)}
        else:
            out = lower_bound_report(args.d, args.delta, args.Delta, args.zeta)
    except (ContractError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(dumps(json.loads(json.dumps(out, default=float))))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
