"""Command-line entry point: ``run``, ``test`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from ..domain import US
from ..icps_sim import TraceFormatError
from ..transport import ChannelKind
from .cases import ChannelUnavailable, TestCase, TestParams, run_test
from .config import ConfigError
from .report import TestReport, report

log = logging.getLogger(__name__)

EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_SKIPPED = 77


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpcsys", description="Virtual PLC cluster testbed")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one role in this process")
    run.add_argument("role", choices=("icps", "vpc", "vpcmo", "registry", "grandmaster"))
    run.add_argument("--config", required=True, help="role config file")
    run.add_argument("--node", type=int, help="node id, overriding the config")

    test = sub.add_parser("test", help="run a test case end to end")
    test.add_argument("case", choices=[c.value for c in TestCase])
    test.add_argument("--samples", type=int, default=10_000)
    test.add_argument("--interval-us", type=float, default=1000.0)
    test.add_argument("--channel", choices=[k.value for k in ChannelKind], default=ChannelKind.IN_PROCESS.value)
    test.add_argument("--timeout-cycles", type=int, default=2)
    test.add_argument("--backups", type=int, default=1)
    test.add_argument("--reconfigs", type=int, default=3)
    test.add_argument("--kill-at", type=int, default=5_000)
    test.add_argument("--seed", type=int, default=0)
    test.add_argument("--out", help="directory for the trace CSV and report JSON")
    test.add_argument("--json", action="store_true", help="print the report as JSON")

    rep = sub.add_parser("report", help="recompute a report from a trace CSV")
    rep.add_argument("trace")
    rep.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def _summary(rep: TestReport) -> str:
    lines = [f"case: {rep.case}"]
    if rep.stats:
        s = rep.stats
        lines.append(
            "cycle time (us): min {:.1f}  median {:.1f}  p99.99 {:.1f}  max {:.1f}  jitter {:.1f}".format(
                s["min"] / 1000, s["median"] / 1000, s["p9999"] / 1000, s["max"] / 1000, s["jitter"] / 1000
            )
        )
    lines.append(f"missed: {rep.missed_count}  duplicates: {rep.duplicates}  rt classes: {rep.rt_classes}")
    for name, ok in {**rep.checks, **rep.live_checks}.items():
        lines.append(f"  {'PASS' if ok else 'FAIL'}  {name}")
    for k, v in rep.informational.items():
        lines.append(f"  info  {k}: {v}")
    if rep.trace_path:
        lines.append(f"trace: {rep.trace_path}")
    return "\n".join(lines)


def _emit(rep: TestReport, as_json: bool) -> int:
    print(rep.to_json() if as_json else _summary(rep))
    if rep.passed:
        return 0
    for name in rep.violations:
        print(f"violated: {name}", file=sys.stderr)
    return EXIT_VIOLATION


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")

    if args.command == "run":
        from .procs import load_role_config, run_role

        try:
            cfg = load_role_config(args.config, args.node)
        except (OSError, ConfigError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return run_role(args.role, cfg)

    if args.command == "report":
        try:
            rep = report(args.trace)
        except (OSError, TraceFormatError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return _emit(rep, args.json)

    params = TestParams(
        samples=args.samples,
        interval_ns=int(args.interval_us * US),
        channel=ChannelKind(args.channel),
        timeout_cycles=args.timeout_cycles,
        backups=args.backups,
        reconfigs=args.reconfigs,
        kill_at=args.kill_at,
        seed=args.seed,
        out_dir=args.out,
    )
    try:
        rep = run_test(TestCase(args.case), params)
    except ChannelUnavailable as exc:
        print(f"SKIPPED: {exc}")
        return EXIT_SKIPPED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, TimeoutError, OSError) as exc:
        print(f"error: topology launch failed: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    return _emit(rep, args.json)


if __name__ == "__main__":
    sys.exit(main())
