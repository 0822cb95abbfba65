"""Command-line entry point.

Exit codes: 0 passed (warnings included), 1 failed or divergent replay,
2 broken run, usage error, or config/validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from iotbed.collector import LogFormatError, ReplayError, replay
from iotbed.config import ConfigError, config_names, load_config
from iotbed.demo import builtin_suite_documents, demo_document
from iotbed.reporter import build_report, emit_json, emit_junit_xml
from iotbed.runner import (
    BROKEN,
    FAILED,
    PerfSpec,
    PerfSpecError,
    SuiteError,
    load_suites,
    parse_suite,
)
from iotbed.session import execute_run, merge_results, perf_run, suite_run
from iotbed.testbed import ProvisionError, UnknownDeviceError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BROKEN = 2
SEED_ENV = "PATRIOT_SEED"
BUILTIN_SUITES = ("smoke", "scenario", "resilience", "all")


def exit_code(verdict: str) -> int:
    if verdict == BROKEN:
        return EXIT_BROKEN
    if verdict == FAILED:
        return EXIT_FAILED
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_BROKEN, f"{self.prog}: error: {message}\n")


def _seed(value: str) -> int:
    n = int(value, 0)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return n


def _resolve_seed(args, config_seed: int | None) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        return _seed(env)
    return config_seed if config_seed is not None else 0


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _suites_for(arg: str, document: bytes, select: str | None):
    if arg.startswith("builtin:"):
        which = arg.split(":", 1)[1]
        if which not in BUILTIN_SUITES:
            raise SuiteError(f"unknown builtin suite {which!r}; choose from {', '.join(BUILTIN_SUITES)}")
        docs = builtin_suite_documents(load_config(document, select))
        if which != "all":
            docs = [d for d in docs if d["name"] == which]
            if not docs:
                raise SuiteError(f"builtin suite {which!r} does not apply to this config")
        return [parse_suite(d) for d in docs]
    path = Path(arg)
    return load_suites(path.read_bytes(), path.parent)


def cmd_run(args) -> int:
    try:
        document = Path(args.config).read_bytes()
        cfg = load_config(document, args.select)
        suites = _suites_for(args.suite, document, args.select)
        seed = _resolve_seed(args, cfg.seed)
        outcome = execute_run(document, cfg.name, seed, suite_run(suites, args.loopback_adapters))
    except (OSError, ConfigError, SuiteError, ProvisionError, argparse.ArgumentTypeError) as exc:
        _err(f"error: {exc}")
        return EXIT_BROKEN
    if args.log:
        outcome.log.write(args.log)
    merged = merge_results(outcome.results)
    if args.report_json or args.report_xml:
        report = build_report(merged, outcome.log)
        if args.report_json:
            Path(args.report_json).write_bytes(emit_json(report))
        if args.report_xml:
            Path(args.report_xml).write_bytes(emit_junit_xml(report))
    for case in merged.cases:
        _err(f"{case.verdict:<18} {case.name}")
    print(f"VERDICT {outcome.verdict}")
    return exit_code(outcome.verdict)


def cmd_replay(args) -> int:
    try:
        report = replay(Path(args.log).read_bytes(), Path(args.config).read_bytes(), args.select)
    except ReplayError as exc:
        _err(f"replay refused: {exc}")
        return EXIT_BROKEN
    except (OSError, LogFormatError, ConfigError) as exc:
        _err(f"error: {exc}")
        return EXIT_BROKEN
    if report.identical:
        print("REPLAY identical")
        return EXIT_OK
    print(f"REPLAY divergent first_divergence={report.first_divergence}")
    for d in report.divergences[:20]:
        _err(f"  seq={d.seq} field={d.field} log={d.left!r} replay={d.right!r}")
    return EXIT_FAILED


def cmd_perf(args) -> int:
    try:
        fields = json.loads(args.fields)
        if not isinstance(fields, dict):
            raise ValueError("--fields must be a JSON object")
        document = Path(args.config).read_bytes()
        cfg = load_config(document, args.select)
        seed = _resolve_seed(args, cfg.seed)
        spec = PerfSpec(args.target, args.rate, args.duration, fields)
        if not spec.rate_per_s > 0 or spec.duration_ms <= 0:
            raise PerfSpecError("rate and duration must be > 0")
        outcome = execute_run(document, cfg.name, seed, perf_run(spec, args.loopback_adapters))
    except (OSError, ValueError, ConfigError, PerfSpecError, ProvisionError, UnknownDeviceError) as exc:
        _err(f"error: {exc}")
        return EXIT_BROKEN
    if args.log:
        outcome.log.write(args.log)
    print(json.dumps(outcome.perf.to_json()))
    return EXIT_OK


def cmd_demo(args) -> int:
    try:
        doc = demo_document(args.id)
    except ValueError as exc:
        _err(f"error: {exc}")
        return EXIT_BROKEN
    sys.stdout.write(doc.decode("utf-8"))
    return EXIT_OK


def cmd_list_configs(args) -> int:
    try:
        names = config_names(Path(args.config).read_bytes())
    except (OSError, ConfigError) as exc:
        _err(f"error: {exc}")
        return EXIT_BROKEN
    for n in names:
        print(n)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotbed", description="Deterministic IoT testbed runner")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="testbed config document (JSON)")
        p.add_argument("--select", help="config name within the document")
        if seed:
            p.add_argument("--seed", type=_seed, help=f"global seed (default: ${SEED_ENV}, else config seed, else 0)")
            p.add_argument("--log", help="write the collector log (.plog) here")
            p.add_argument("--loopback-adapters", action="store_true",
                           help="treat every adapter slot as loopback (no sockets)")

    p = sub.add_parser("run", help="provision a testbed and run suites")
    common(p)
    p.add_argument("--suite", required=True, help="suite file, or builtin:smoke|scenario|resilience|all")
    p.add_argument("--report-json")
    p.add_argument("--report-xml")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-execute a logged run and compare")
    p.add_argument("--log", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--select")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("perf", help="open-loop performance run against an actuator endpoint")
    common(p)
    p.add_argument("--target", required=True, help="device.endpoint")
    p.add_argument("--rate", type=float, required=True, help="requests per sim-second")
    p.add_argument("--duration", type=int, required=True, help="sim milliseconds")
    p.add_argument("--fields", default="{}", help="request fields as a JSON object")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("demo", help="print a built-in demo config document")
    p.add_argument("--id", type=int, required=True)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("list-configs", help="list config names in a document")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_list_configs)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
