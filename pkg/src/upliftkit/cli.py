"""Command-line entry point.

Verbs:
  validate  check a pipeline config, print diagnostics
  run       execute the full pipeline into --out
  synth     draw a dataset from a DGP spec and write CSV + schema
  eval      evaluate a saved policy on a CSV dataset

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, DataError
from .pipeline import (
    PipelineConfig,
    PipelineStageError,
    evaluate_saved_policy,
    run,
    synth_to_csv,
    validate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upliftkit",
        description="Design and evaluate personalized treatment policies offline.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, needs_out in (
        ("validate", False),
        ("run", True),
        ("synth", True),
        ("eval", True),
    ):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="path to the JSON config")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--jobs", type=int, default=1, help="worker budget (advisory)")
    return parser


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _dispatch(args) -> int:
    if args.verb == "validate":
        config = PipelineConfig.from_dict(_load_json(args.config))
        problems = validate(config)
        if problems:
            for problem in problems:
                print(f"config problem: {problem}", file=sys.stderr)
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK
    if args.verb == "run":
        config = PipelineConfig.from_dict(_load_json(args.config))
        manifest = run(config, args.out, seed_override=args.seed, jobs=args.jobs)
        print(f"wrote {len(manifest['outputs'])} report files to {args.out}")
        return EXIT_OK
    if args.verb == "synth":
        path = synth_to_csv(args.config, args.out, seed_override=args.seed)
        print(f"wrote {path}")
        return EXIT_OK
    if args.verb == "eval":
        config = _load_json(args.config)
        report = evaluate_saved_policy(config, args.out)
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    raise ConfigError(f"unknown verb {args.verb!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except PipelineStageError as exc:
        cause = exc.cause
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(cause, DataError):
            return EXIT_DATA
        return EXIT_RUNTIME
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
