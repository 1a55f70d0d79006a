"""Command-line entry point: ``triad node|sim|export|external|query``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_experiment_spec, load_keys, load_node_config, parse_address
from .experiments import EXPORT_KINDS, SCENARIOS, export_trace_file, run_experiment
from .service import EXIT_CLEAN, EXIT_CONFIG, query_node, run_node, serve_external
from .sim.schedule import ScheduleInvalid
from .wire import Timeout


def _fail(message: str) -> int:
    print(f"triad: error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_node(args) -> int:
    try:
        config = load_node_config(args.config)
        return run_node(config)
    except ConfigError as exc:
        return _fail(str(exc))


def cmd_sim(args) -> int:
    try:
        spec = load_experiment_spec(args.spec)
        if args.output_dir:
            spec.output_dir = Path(args.output_dir)
        if args.seed is not None:
            spec.seed = args.seed
        result = run_experiment(spec)
    except ScheduleInvalid as exc:
        return _fail(f"schedule: {exc}")
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc))
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    print(f"wrote {', '.join(str(p) for p in result.files.values())}", file=sys.stderr)
    return EXIT_CLEAN


def cmd_export(args) -> int:
    try:
        text = export_trace_file(args.trace, args.kind)
    except FileNotFoundError:
        return _fail(f"trace not found: {args.trace}")
    except ValueError as exc:
        return _fail(str(exc))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_CLEAN


def cmd_external(args) -> int:
    try:
        return serve_external(parse_address(args.listen), load_keys(args.key_file))
    except ConfigError as exc:
        return _fail(str(exc))


def cmd_query(args) -> int:
    try:
        keys = load_keys(args.key_file)
        if args.client_id not in keys:
            return _fail(f"key file has no key for client {args.client_id}")
        ts = query_node(parse_address(args.node), args.client_id, keys[args.client_id], args.node_id,
                        args.timeout)
    except ConfigError as exc:
        return _fail(str(exc))
    except (Timeout, RuntimeError) as exc:
        print(f"triad: {exc}", file=sys.stderr)
        return 1
    print(f"{ts.nanos} +/- {ts.error_bound_nanos} ns")
    return EXIT_CLEAN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triad", description="Trusted timestamps from a trio of nodes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("node", help="run a node daemon")
    p.add_argument("--config", required=True, help="node TOML file")
    p.set_defaults(func=cmd_node)

    p = sub.add_parser("sim", help="run a simulated experiment",
                       epilog="scenarios: " + ", ".join(SCENARIOS))
    p.add_argument("--spec", required=True, help="experiment TOML file")
    p.add_argument("--output-dir", help="override the spec's output directory")
    p.add_argument("--seed", type=int, help="override the spec's seed")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("export", help="turn a trace CSV into plot data")
    p.add_argument("--trace", required=True)
    p.add_argument("--kind", required=True, choices=EXPORT_KINDS)
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("external", help="run the external time source stub")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--key-file", required=True)
    p.set_defaults(func=cmd_external)

    p = sub.add_parser("query", help="ask a running node for a timestamp")
    p.add_argument("--node", required=True, help="host:port of the node")
    p.add_argument("--node-id", type=int, required=True)
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--key-file", required=True)
    p.add_argument("--timeout", type=float, default=2.0)
    p.set_defaults(func=cmd_query)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
