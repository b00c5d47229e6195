#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Pipeline Module
Runs scan, selection, liveness, test generation, synthesis and
diversification as separate stages that hand over through JSON artifacts.
"""

import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

from asm_parser import parse_program
from block_liveness import compute_live_sets
from cfg_builder import build_cfg
from diversifier import (
    TYPE_M_CAVEAT, emit_firmware_rewrites, gadget_survival_report, payload_check,
    payload_fleet_report, resolve_payload, verify_variant,
)
from errors import BlockDivError, NonDiversifiable, PartialResult, StageError, UnresolvableGadget
from gadget_scanner import GadgetFilter, census_report, scan_gadgets, select_type_r
from models.diversity import ChoiceStrategy, DiversityPlan, PayloadSpec
from models.gadget import GadgetRecord
from models.live_set import LiveSet
from models.test_case import TestCase
from synthesizer import generate_n_rewrites
from taint_rda import TaintSources, analyze_reaching_definitions, describe, observation_points, select_type_m
from testgen import build_suite
from utils.bit_ops import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """
    Everything one run depends on

    Attributes:
        input_path: assembly file
        settings: SettingsConfig with CLI overrides already applied
        out_dir: artifact directory
        strict: reject unsupported instructions instead of keeping them opaque
    """

    input_path: str
    settings: object
    out_dir: str
    strict: bool = False

    @property
    def entry(self):
        return self.settings.get_entry()

    @property
    def seed(self):
        return self.settings.get_seed()


@contextmanager
def stage(name):
    """tag any toolkit or I/O error raised inside with the stage name"""
    try:
        yield
    except StageError:
        raise
    except (BlockDivError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def _synthesize_block(block, live, suite, config, records):
    """worker body; returns (rewrites, warning or None)"""
    try:
        return generate_n_rewrites(block, live, suite, config, records), None
    except PartialResult as exc:
        return exc.rewrites, str(exc)
    except NonDiversifiable as exc:
        return [], str(exc)


class Pipeline:
    def __init__(self, config, store):
        """
        Args:
            config: PipelineConfig
            store: ArtifactStore of config.out_dir
        """
        self.config = config
        self.settings = config.settings
        self.store = store
        self._program = None
        self._cfg = None

    # shared inputs

    @property
    def program(self):
        if self._program is None:
            with stage("parse"):
                if not os.path.exists(self.config.input_path):
                    raise FileNotFoundError(f"input {self.config.input_path} does not exist")
                with open(self.config.input_path, "r", encoding="utf-8") as f:
                    self._program = parse_program(f.read(), strict=self.config.strict)
        return self._program

    @property
    def cfg(self):
        if self._cfg is None:
            with stage("scan"):
                self._cfg = build_cfg(self.program, self.config.entry)
        return self._cfg

    def _load(self, name, producer):
        """JSON artifact name, produced by running the earlier stage when missing"""
        if not self.store.exists(name):
            producer()
        return self.store.read_json(name)

    def save_settings(self):
        self.settings.save_config(self.store.path("settings.ini"))

    # stages

    def scan(self):
        """CFG, gadget records and the census"""
        options = self.settings.selection_options()
        with stage("scan"):
            records = scan_gadgets(self.cfg, options["max_gadget_len"], options["risky_call_callees"])
            census = census_report(records, self.cfg)
            census["seed"] = self.config.seed
            self.store.write_json("cfg.json", self.cfg.to_dict())
            self.store.write_json("gadgets.json", {"records": [record.to_dict() for record in records]})
            self.store.write_json("census.json", census)
        logger.info("scan: %d blocks, %d gadget records", len(self.cfg.blocks), len(records))
        return records

    def records(self):
        data = self._load("gadgets.json", self.scan)
        return [GadgetRecord.from_dict(item) for item in data["records"]]

    def select(self):
        """Type R and Type M selection; returns sorted block ids"""
        options = self.settings.selection_options()
        records = self.records()
        with stage("select"):
            gadget_filter = GadgetFilter.parse(options["type_r_kinds"], options["type_r_registers"])
            type_r = select_type_r(records, gadget_filter)
            sources = TaintSources(options["source_registers"], options["input_callees"])
            results = analyze_reaching_definitions(
                self.cfg, self.config.entry, observation_points(self.cfg), sources, options["depth_limit"],
            )
            type_m = select_type_m(results, options["type_m_risky"])
            for result in results:
                logger.debug("taint %s", describe(result))

            selected = sorted(bid for bid in set(type_r) | set(type_m) if self.cfg.block(bid).selectable)
            notes = []
            if not selected:
                notes.append("no selectable blocks")
                logger.warning("selection found no selectable blocks")
            self.store.write_json("typer.json", {
                "seed": self.config.seed,
                "blocks": [{"block": bid, "label": self.cfg.block(bid).label} for bid in type_r],
            })
            self.store.write_json("typem.json", {
                "seed": self.config.seed,
                "blocks": [{"block": bid, "label": self.cfg.block(bid).label} for bid in type_m],
                "points": [result.to_dict() for result in results],
            })
            self.store.write_json("selection.json", {
                "seed": self.config.seed,
                "blocks": [
                    {"block": bid, "label": self.cfg.block(bid).label,
                     "reasons": [name for name, ids in (("TypeR", type_r), ("TypeM", type_m)) if bid in ids]}
                    for bid in selected
                ],
                "warnings": notes,
            })
        logger.info("select: %d Type R, %d Type M, %d selected", len(type_r), len(type_m), len(selected))
        return selected

    def selection(self):
        data = self._load("selection.json", self.select)
        return [item["block"] for item in data["blocks"]]

    def liveness(self):
        """live sets of the selected diversifiable blocks"""
        live_sets = {}
        skipped = []
        with stage("liveness"):
            for block_id in self.selection():
                block = self.cfg.block(block_id)
                if not block.diversifiable:
                    skipped.append(block.label)
                    logger.warning("block %s is not diversifiable, skipped", block.label)
                    continue
                live_sets[block_id] = compute_live_sets(block)
            self.store.write_json("liveness.json", {
                "blocks": [{"block": bid, "label": self.cfg.block(bid).label, "live": live.to_dict()}
                           for bid, live in sorted(live_sets.items())],
                "warnings": [f"NonDiversifiable({label})" for label in skipped],
            })
        return live_sets

    def live_sets(self):
        data = self._load("liveness.json", self.liveness)
        return {item["block"]: LiveSet.from_dict(item["live"]) for item in data["blocks"]}

    def testgen(self):
        """one seeded suite per block, written to suites/"""
        options = self.settings.testgen_options()
        suites = {}
        with stage("testgen"):
            for block_id, live in sorted(self.live_sets().items()):
                block = self.cfg.block(block_id)
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    suite = build_suite(block, live, options["size"], options["fuzz_ratio"],
                                        derive_seed(self.config.seed, "suite", block_id), options["fuzz_budget"])
                suites[block_id] = suite
                self.store.write_json(f"suites/block_{block_id}.json", {
                    "block": block_id,
                    "label": block.label,
                    "cases": [case.to_dict() for case in suite],
                    "warnings": sorted({f"{w.category.__name__}: {w.message}" for w in caught}),
                })
        logger.info("testgen: %d suites", len(suites))
        return suites

    def suites(self):
        suites = {}
        live_sets = self.live_sets()
        if any(not self.store.exists(f"suites/block_{bid}.json") for bid in live_sets):
            self.testgen()
        for block_id in sorted(live_sets):
            block = self.cfg.block(block_id)
            data = self.store.read_json(f"suites/block_{block_id}.json")
            suites[block_id] = [TestCase.from_dict(item, block.instructions) for item in data["cases"]]
        return suites

    def synth(self):
        """N validated rewrites per block, then the diversity plan"""
        config = self.settings.synthesis_config()
        live_sets = self.live_sets()
        suites = self.suites()
        records = self.records()
        jobs = []
        for block_id, live in sorted(live_sets.items()):
            block = self.cfg.block(block_id)
            if not suites[block_id]:
                logger.warning("block %s has no runnable test cases, skipped", block.label)
                continue
            jobs.append((block, live, suites[block_id], config, [r for r in records if r.block_id == block_id]))

        with stage("synth"):
            workers = self.settings.get_int("Pipeline", "workers", 1)
            if workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=workers) as executor:
                    futures = [executor.submit(_synthesize_block, *job) for job in jobs]
                    outcomes = [future.result() for future in futures]
            else:
                outcomes = [_synthesize_block(*job) for job in jobs]

            max_blocks = self.settings.get_int("Pipeline", "max_blocks_per_variant")
            plan = DiversityPlan(
                entry=self.config.entry,
                strategy=ChoiceStrategy(self.settings.get("Pipeline", "strategy", "modulo")),
                seed=self.config.seed,
                max_blocks=max_blocks,
            )
            for (block, *_rest), (rewrites, warning) in zip(jobs, outcomes):
                notes = []
                if warning:
                    notes.append(warning)
                if not rewrites:
                    notes.append(f"NotFound({block.label})")
                    logger.warning("no rewrite found for block %s", block.label)
                elif warning:
                    logger.warning("block %s: %s", block.label, warning)
                self.store.write_json(f"rewrites/block_{block.id}.json", {
                    "block": block.id,
                    "label": block.label,
                    "requested": config.n_rewrites,
                    "rewrites": [candidate.to_dict() for candidate in rewrites],
                    "warnings": notes,
                })
                if rewrites:
                    plan.add(block, rewrites)
            self.store.write_json("plan.json", plan.to_dict())
        logger.info("synth: %d of %d blocks diversified", len(plan.selections), len(jobs))
        return plan

    def plan(self):
        return DiversityPlan.from_dict(self._load("plan.json", self.synth))

    def diversify(self):
        """variants, manifest and gadget survival"""
        plan = self.plan()
        n = self.settings.get_int("Pipeline", "n_variants", 1)
        records = self.records()
        max_len = self.settings.selection_options()["max_gadget_len"]
        with stage("diversify"):
            manifest = emit_firmware_rewrites(self.program, plan, n, self.store)
            reports = {}
            for item in manifest["variants"]:
                variant = parse_program(self.store.read_text(item["file"]))
                reports[item["file"]] = gadget_survival_report(
                    self.program, variant, records, self.config.entry, max_len=max_len)
            typem = self._load("typem.json", self.select)
            notes = [TYPE_M_CAVEAT] if typem["blocks"] else []
            self.store.write_json("survival.json", {"seed": self.config.seed, "variants": reports, "notes": notes})
        return manifest

    def manifest(self):
        return self._load("manifest.json", self.diversify)

    def variants(self):
        """file name -> Program of every emitted variant"""
        with stage("parse"):
            return {item["file"]: parse_program(self.store.read_text(item["file"]))
                    for item in self.manifest()["variants"]}

    def verify(self):
        """re-run every spliced block of every variant on fresh suites"""
        plan = self.plan()
        options = self.settings.testgen_options()
        report = {}
        with stage("verify"):
            for item in self.manifest()["variants"]:
                variant = parse_program(self.store.read_text(item["file"]))
                report[item["file"]] = verify_variant(
                    self.program, variant, plan, item["variant"], derive_seed(self.config.seed, "verify"),
                    options["size"], options["fuzz_budget"],
                )
            failures = sum(entry["failures"] for blocks in report.values() for entry in blocks.values())
            self.store.write_json("verify.json", {"seed": self.config.seed, "failures": failures, "variants": report})
        return failures

    def payload_check(self, payload_path):
        """payload verdict on the original and on every variant"""
        with stage("payload-check"):
            with open(payload_path, "r", encoding="utf-8") as f:
                payload = PayloadSpec.from_dict(json.load(f))
            try:
                resolved = resolve_payload(self.cfg, payload)
            except UnresolvableGadget as exc:
                logger.warning("%s; it counts as broken", exc)
                resolved = resolve_payload(self.cfg, payload, strict=False)
            original = payload_check(self.program, payload, self.config.entry, resolved)
            fleet = payload_fleet_report(self.variants(), payload, self.config.entry, resolved)
            report = {"seed": self.config.seed, "payload": payload.to_dict(),
                      "original": original.to_dict(), "fleet": fleet}
            self.store.write_json("payload_report.json", report)
        logger.info("payload: original feasible=%s, %d/%d variants feasible",
                    original.feasible, fleet["feasible"], fleet["total"])
        return report


def run_pipeline(config, store, dry_run=False, payload_path=None):
    """
    Full run: scan, select, liveness, testgen, synth, diversify, reports

    Args:
        config: PipelineConfig
        store: ArtifactStore
        dry_run: stop after selection and the census
        payload_path: optional payload JSON to check every variant against

    Returns:
        summary dict

    Raises:
        StageError: any fatal error, tagged with its stage
    """
    pipeline = Pipeline(config, store)
    pipeline.save_settings()
    pipeline.scan()
    selected = pipeline.select()
    summary = {"seed": config.seed, "selected": len(selected)}
    if dry_run or not selected:
        return summary
    pipeline.liveness()
    pipeline.testgen()
    plan = pipeline.synth()
    manifest = pipeline.diversify()
    summary["diversified"] = len(plan.selections)
    summary["variants"] = len(manifest["variants"])
    if payload_path:
        report = pipeline.payload_check(payload_path)
        summary["payload_feasible"] = report["fleet"]["feasible"]
    return summary
