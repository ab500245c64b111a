"""Command-line entry point: run, summarize, validate-templates."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, ConfigMismatch
from .pipeline import (
    EXIT_CONFIG_ERROR,
    Mode,
    Stage,
    load_config,
    run_pipeline,
    summarize_output_dir,
    validate_templates,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialmatch",
        description="Match patient records against actively recruiting clinical trials.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute the four-step pipeline over a patient corpus")
    run.add_argument("--config", required=True, type=Path,
                     help="JSON config file; relative paths resolve against it")
    run.add_argument("--parallelism", type=int, default=None,
                     help="concurrent patient-trial evaluations")
    run.add_argument("--registry-mode", choices=["live", "replay"], default=None)
    run.add_argument("--inference-mode", choices=["live", "replay"], default=None)
    run.add_argument("--resume", type=Path, default=None, metavar="MANIFEST",
                     help="continue a previous run from its manifest")

    summarize = sub.add_parser("summarize",
                               help="rebuild corpus summaries, CSV, and figures from an output tree")
    summarize.add_argument("--out", required=True, type=Path,
                           help="output directory of a previous run")

    sub.add_parser("validate-templates",
                   help="check shipped prompt templates parse and render completely"
                   ).add_argument("--templates-dir", type=Path, default=None)
    return parser


def _cmd_run(args) -> int:
    overrides = {}
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    if args.registry_mode is not None:
        overrides["registry_mode"] = Mode(args.registry_mode)
    if args.inference_mode is not None:
        overrides["inference_mode"] = Mode(args.inference_mode)
    config = load_config(args.config, overrides)
    manifest, exit_code = run_pipeline(config, resume_manifest=args.resume)
    reported = sum(1 for s in manifest.patients.values() if s.state is Stage.REPORTED)
    print(f"run {manifest.run_id}: {reported}/{len(manifest.patients)} patients reported")
    for pid, state in sorted(manifest.patients.items()):
        if state.state is Stage.FAILED:
            print(f"  {pid} failed: {state.reason}", file=sys.stderr)
    return exit_code


def _cmd_summarize(args) -> int:
    doc = summarize_output_dir(args.out)
    batch = doc["batch"]
    print(f"{batch['total_assessments']} assessments across "
          f"{batch['patients_total']} patients; "
          f"{batch['patients_with_match']} with a current match")
    print(f"wrote summary.json, summary.md, summary.csv, figures/ under {args.out}")
    return 0


def _cmd_validate_templates(args) -> int:
    problems = validate_templates(args.templates_dir)
    if problems:
        for problem in problems:
            print(f"FAIL: {problem}", file=sys.stderr)
        return 1
    print("templates OK")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "summarize":
            return _cmd_summarize(args)
        return _cmd_validate_templates(args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
