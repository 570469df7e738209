"""Command-line interface: run experiments, audit logs, recompute metrics.

Exit codes: 0 success, 2 constraint-audit failure, 3 divergence/watchdog.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import harness
from .nmpc_loop import WatchdogError
from .plant import PlantDivergedError


def _cmd_run(args) -> int:
    config = harness.load_config(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = {"virtual": "virtual", "wall": "wall"}[args.mode]
    if args.duration is not None:
        overrides["duration"] = args.duration
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = replace(config, **overrides)
    try:
        log, metrics = harness.run_experiment(config)
    except (WatchdogError, PlantDivergedError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return harness.EXIT_DIVERGENCE
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if config.out_dir:
        print(f"artifacts written to {config.out_dir}", file=sys.stderr)
    return harness.EXIT_OK


def _cmd_audit(args) -> int:
    config = harness.load_config(args.config)
    log = harness.RunLog.from_csv(args.log)
    report = harness.audit_constraints(log, config.ocp.bounds,
                                       padding=args.padding)
    for row in report.rows:
        touch = "-" if row.first_touch is None else f"{row.first_touch:.3f}s"
        print(f"{row.family:>4s}[{row.axis}] {row.side:>3s} "
              f"bound={row.bound:12.5g} max_violation={row.max_violation:.3e} "
              f"near={row.near_count:6d} first_touch={touch}")
    print(f"max violation: {report.max_violation:.3e} "
          f"(padding {report.padding:g})")
    return harness.EXIT_OK if report.ok else harness.EXIT_AUDIT_FAILURE


def _cmd_metrics(args) -> int:
    log = harness.RunLog.from_csv(args.log)
    print(json.dumps(harness.compute_rms_metrics(log), indent=2,
                     sort_keys=True))
    return harness.EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="armnmpc",
        description="Receding-horizon NMPC experiments for a planar 2-link arm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a closed-loop experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--mode", choices=["virtual", "wall"])
    p_run.add_argument("--duration", type=float)
    p_run.add_argument("--out")
    p_run.set_defaults(func=_cmd_run)

    p_audit = sub.add_parser("audit", help="audit a run log against bounds")
    p_audit.add_argument("--log", required=True)
    p_audit.add_argument("--config", required=True)
    p_audit.add_argument("--padding", type=float, default=1e-6)
    p_audit.set_defaults(func=_cmd_audit)

    p_metrics = sub.add_parser("metrics", help="recompute metrics from a log")
    p_metrics.add_argument("--log", required=True)
    p_metrics.set_defaults(func=_cmd_metrics)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
