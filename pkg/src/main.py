#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
BlockDiv
Diversifies the gadget-bearing and taint-reachable basic blocks of x86-64
assembly programs with synthesized, test-equivalent rewrites.
"""

import argparse
import json
import logging
import sys

from errors import StageError
from pipeline import Pipeline, PipelineConfig, run_pipeline, stage
from storage_manager import ArtifactStore
from utils.settings_config import SettingsConfig

SUBCOMMANDS = ("scan", "select", "liveness", "testgen", "synth", "diversify", "verify", "payload-check", "run")


def build_parser():
    parser = argparse.ArgumentParser(prog="blockdiv", description="Basic-block diversification toolkit")
    parser.add_argument("--seed", type=lambda text: int(text, 0), default=None, help="master seed")
    parser.add_argument("--config", default=None, help="INI settings file")
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("--json", action="store_true", help="print the result as JSON, log warnings only")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="cmd", required=True)

    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run the whole pipeline")
        p.add_argument("input", help="assembly file")
        p.add_argument("--entry", default=None, help="entry symbol (default from settings: main)")
        p.add_argument("--strict", action="store_true", help="reject unsupported instructions")
        if name in ("synth", "run"):
            p.add_argument("--n-rewrites", type=int, default=None, help="rewrites per block")
            p.add_argument("--iterations", type=int, default=None, help="search iterations per restart")
            p.add_argument("--workers", type=int, default=None, help="synthesis processes")
        if name in ("diversify", "run"):
            p.add_argument("-n", "--variants", type=int, default=None, help="firmware variants to emit")
            p.add_argument("--strategy", choices=("modulo", "random"), default=None)
        if name == "run":
            p.add_argument("--dry-run", action="store_true", help="selection and census only")
            p.add_argument("--payload", default=None, help="payload JSON to check the variants against")
        if name == "payload-check":
            p.add_argument("payload", help="payload JSON")
    return parser


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def load_settings(args):
    """settings file, then environment, then command line flags"""
    settings = SettingsConfig(args.config)
    overrides = {
        ("Pipeline", "seed"): args.seed,
        ("Pipeline", "entry"): getattr(args, "entry", None),
        ("Pipeline", "n_variants"): getattr(args, "variants", None),
        ("Pipeline", "strategy"): getattr(args, "strategy", None),
        ("Pipeline", "workers"): getattr(args, "workers", None),
        ("Synthesis", "n_rewrites"): getattr(args, "n_rewrites", None),
        ("Synthesis", "iterations"): getattr(args, "iterations", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            settings.set(section, key, value)
    return settings


def run_command(args, settings):
    """
    Run one subcommand

    Returns:
        (result dict, exit status)
    """
    store = ArtifactStore(args.out)
    config = PipelineConfig(args.input, settings, args.out, strict=args.strict)
    if args.cmd == "run":
        summary = run_pipeline(config, store, dry_run=args.dry_run, payload_path=args.payload)
        return summary, 0

    pipeline = Pipeline(config, store)
    pipeline.save_settings()
    if args.cmd == "scan":
        records = pipeline.scan()
        return {"blocks": len(pipeline.cfg.blocks), "records": len(records)}, 0
    if args.cmd == "select":
        return {"selected": pipeline.select()}, 0
    if args.cmd == "liveness":
        return {"blocks": len(pipeline.liveness())}, 0
    if args.cmd == "testgen":
        suites = pipeline.testgen()
        return {"suites": {str(bid): len(suite) for bid, suite in suites.items()}}, 0
    if args.cmd == "synth":
        plan = pipeline.synth()
        return {"diversified": len(plan.selections)}, 0
    if args.cmd == "diversify":
        manifest = pipeline.diversify()
        return {"variants": [item["file"] for item in manifest["variants"]]}, 0
    if args.cmd == "verify":
        failures = pipeline.verify()
        return {"failures": failures}, 1 if failures else 0
    report = pipeline.payload_check(args.payload)
    return {"original_feasible": report["original"]["feasible"],
            "variants_feasible": report["fleet"]["feasible"], "variants": report["fleet"]["total"]}, 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.json)

    try:
        with stage("config"):
            settings = load_settings(args)
        with stage(args.cmd):
            result, status = run_command(args, settings)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        for key, value in sorted(result.items()):
            print(f"{key}: {value}")
    return status


if __name__ == "__main__":
    sys.exit(main())
