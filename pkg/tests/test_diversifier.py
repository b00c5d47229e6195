#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json

import pytest

from asm_parser import parse_instruction, parse_program, render_program
from cfg_builder import build_cfg
from diversifier import (
    emit_firmware_rewrites, gadget_survival_report, modeled_length, payload_check, payload_fleet_report,
    resolve_payload, splice, verify_variant,
)
from errors import InvalidCount, SizeRegression, SpliceConflict, UnresolvableGadget
from gadget_scanner import scan_gadgets
from models.diversity import ChoiceStrategy, DiversityPlan, PayloadGadget, PayloadSpec
from models.gadget import GadgetClass
from models.instruction import Instruction
from models.rewrite import CostRecord, RewriteCandidate
from storage_manager import ArtifactStore, checksum

from conftest import read_text

HAND_REWRITES = {
    "checksum": [
        ("xor %edx,%edx", "pop %rdi", "mov %rax,%rcx", "ret"),
        ("pop %rdi", "xor %edx,%edx", "mov %rax,%rcx", "ret"),
    ],
    "copy_len": [
        ("pop %rsi", "mov %rdi,%rax", "add $0x8,%rax", "ret"),
        ("lea 0x8(%rdi),%rax", "pop %rsi", "ret"),
    ],
    "scale": [
        ("pop %rdx", "mov %rsi,%rcx", "shl $0x2,%rcx", "ret"),
        ("mov %rsi,%rcx", "pop %rdx", "shl $0x2,%rcx", "ret"),
    ],
}


def _rewrite(texts, validated=True):
    restored = tuple(parse_instruction(text) for text in texts)
    return RewriteCandidate(restored[:-1] + (Instruction("ret"),), CostRecord(), validated, restored)


def _plan(cfg, rewrites=HAND_REWRITES):
    plan = DiversityPlan(entry="main")
    for label, options in rewrites.items():
        plan.add(cfg.block_for_label(label), [_rewrite(texts) for texts in options])
    return plan


@pytest.fixture
def plan(toy_cfg):
    return _plan(toy_cfg)


@pytest.fixture
def payload(payload_path):
    return PayloadSpec.from_dict(json.loads(read_text(payload_path)))


def test_splice_keeps_interior_labels_before_the_exit(toy_program, toy_cfg, plan):
    variant = splice(toy_program, plan, 0, toy_cfg)
    text = render_program(variant)
    assert "checksum:\nxor %edx,%edx\npop %rdi\nmov %rax,%rcx\ng_pop_rdi:\nret\n" in text
    assert len(variant.lines) == len(toy_program.lines)
    assert "g_call_system:\ncall system\n" in text


def test_splice_follows_the_plan_choice(toy_program, toy_cfg, plan):
    text = render_program(splice(toy_program, plan, 1, toy_cfg))
    assert "copy_len:\nlea 0x8(%rdi),%rax\npop %rsi\ng_pop_rsi:\nret\n" in text
    assert modeled_length(parse_program(text)) < modeled_length(toy_program)


def test_empty_plan_returns_the_program(toy_program):
    assert splice(toy_program, DiversityPlan(entry="main"), 0) is toy_program


def test_unvalidated_rewrite_is_refused(toy_program, toy_cfg):
    plan = DiversityPlan(entry="main")
    plan.add(toy_cfg.block_for_label("checksum"), [_rewrite(HAND_REWRITES["checksum"][0], validated=False)])
    with pytest.raises(ValueError):
        splice(toy_program, plan, 0, toy_cfg)


def test_rewrite_must_keep_its_exit(toy_program, toy_cfg):
    plan = DiversityPlan(entry="main")
    plan.add(toy_cfg.block_for_label("checksum"), [_rewrite(("pop %rdi", "jmp checksum"))])
    with pytest.raises(ValueError):
        splice(toy_program, plan, 0, toy_cfg)


def test_block_selected_twice(toy_cfg):
    plan = _plan(toy_cfg)
    with pytest.raises(SpliceConflict):
        plan.add(toy_cfg.block_for_label("scale"), [])


def test_emit_writes_variants_and_manifest(toy_program, plan, tmp_path):
    store = ArtifactStore(tmp_path)
    manifest = emit_firmware_rewrites(toy_program, plan, 2, store)
    assert [item["file"] for item in manifest["variants"]] == ["variant_0.s", "variant_1.s"]
    assert manifest["warnings"] == []
    assert manifest["original"]["checksum"] == checksum(render_program(toy_program))
    first = manifest["variants"][0]
    assert first["choices"] == {"checksum": 0, "copy_len": 0, "scale": 0}
    assert first["checksum"] == checksum(store.read_text("variant_0.s"))
    assert first["length"] <= manifest["original"]["length"]
    assert store.read_json("manifest.json") == manifest


def test_emit_cycles_when_rewrites_run_out(toy_program, plan, tmp_path):
    manifest = emit_firmware_rewrites(toy_program, plan, 3, ArtifactStore(tmp_path))
    assert len(manifest["warnings"]) == 1
    assert manifest["variants"][2]["checksum"] == manifest["variants"][0]["checksum"]
    assert manifest["variants"][1]["checksum"] != manifest["variants"][0]["checksum"]


def test_emit_rejects_zero_variants(toy_program, plan, tmp_path):
    with pytest.raises(InvalidCount):
        emit_firmware_rewrites(toy_program, plan, 0, ArtifactStore(tmp_path))


def test_emit_rejects_a_longer_variant(toy_program, toy_cfg, tmp_path):
    longer = {"checksum": [("mov %rax,%rcx", "xor %edx,%edx", "nop", "pop %rdi", "ret")]}
    with pytest.raises(SizeRegression):
        emit_firmware_rewrites(toy_program, _plan(toy_cfg, longer), 1, ArtifactStore(tmp_path))


def test_payload_holds_on_the_original(toy_program, toy_cfg, payload):
    resolved = resolve_payload(toy_cfg, payload)
    assert [(item.block_label, item.offset) for item in resolved] == [
        ("checksum", 5), ("copy_len", 7), ("scale", 7), ("run_command", 5),
    ]
    assert payload_check(toy_program, payload, "main", resolved).feasible
    assert payload_check(toy_program, payload, "main").feasible


def test_payload_breaks_on_a_variant(toy_program, toy_cfg, plan, payload):
    resolved = resolve_payload(toy_cfg, payload)
    variant = splice(toy_program, plan, 0, toy_cfg)
    verdict = payload_check(variant, payload, "main", resolved)
    assert not verdict.feasible
    assert verdict.first_broken == 0
    assert verdict.verdicts[0].reason == "misaligned"
    assert verdict.verdicts[3].holds


def test_self_resolved_payload_is_judged_by_class(toy_program, toy_cfg, plan, payload):
    variant = splice(toy_program, plan, 0, toy_cfg)
    verdict = payload_check(variant, payload, "main")
    assert not verdict.feasible
    assert verdict.verdicts[0].reason == "class not met"


def test_unresolvable_gadget(toy_program, toy_cfg):
    payload = PayloadSpec((PayloadGadget("nowhere", GadgetClass.change_register("rdi")),))
    with pytest.raises(UnresolvableGadget):
        resolve_payload(toy_cfg, payload)
    resolved = resolve_payload(toy_cfg, payload, strict=False)
    assert resolved == [None]
    verdict = payload_check(toy_program, payload, "main", resolved)
    assert verdict.first_broken == 0
    assert verdict.verdicts[0].reason == "unresolvable"


def test_fleet_report(toy_program, toy_cfg, plan, payload):
    resolved = resolve_payload(toy_cfg, payload)
    variants = {f"variant_{k}.s": splice(toy_program, plan, k, toy_cfg) for k in range(2)}
    report = payload_fleet_report(variants, payload, "main", resolved)
    assert report["total"] == 2
    assert report["feasible"] == 0
    assert report["variants"]["variant_1.s"]["first_broken"] == 0


@pytest.mark.parametrize("strategy", list(ChoiceStrategy))
def test_payload_fails_on_every_emitted_variant(toy_program, toy_cfg, plan, payload, strategy, tmp_path):
    plan.strategy = strategy
    plan.seed = 7
    resolved = resolve_payload(toy_cfg, payload)
    assert payload_check(toy_program, payload, "main", resolved).feasible
    store = ArtifactStore(tmp_path)
    manifest = emit_firmware_rewrites(toy_program, plan, 10, store)
    variants = {item["file"]: parse_program(store.read_text(item["file"])) for item in manifest["variants"]}
    report = payload_fleet_report(variants, payload, "main", resolved)
    assert report["total"] == 10
    assert report["feasible"] == 0


@pytest.mark.parametrize("rewritten, survived", [
    ("mov (%rsp),%rdi\n\tadd $0x8,%rsp", True),
    ("mov %rax,%rdi\n\tadd $0x8,%rsp", False),
])
def test_survival_of_a_pop_gadget(rewritten, survived):
    original = parse_program("f:\n\tpop %rdi\n\tret\n")
    variant = parse_program(f"f:\n\t{rewritten}\n\tret\n")
    records = scan_gadgets(build_cfg(original, "f"))
    report = gadget_survival_report(original, variant, records, "f")
    assert report["total"] == 1
    assert report["gadgets"][0]["survived"] is survived
    assert report["gadgets"][0]["address_valid"] is survived
    assert report["elimination_rate"] == (0.0 if survived else 1.0)


@pytest.mark.parametrize("max_len, survived", [(5, False), (6, True)])
def test_survival_only_counts_suffixes_within_max_len(max_len, survived):
    original = parse_program("f:\n\tpop %rdi\n\tret\n")
    variant = parse_program("f:\n\tpop %rdi\n\tnop\n\tnop\n\tnop\n\tnop\n\tret\n")
    records = scan_gadgets(build_cfg(original, "f"), max_len=max_len)
    report = gadget_survival_report(original, variant, records, "f", max_len=max_len)
    assert report["total"] == 1
    assert report["gadgets"][0]["survived"] is survived


def test_survival_on_the_toy_variant(toy_program, toy_cfg, plan):
    records = scan_gadgets(toy_cfg)
    variant = splice(toy_program, plan, 0, toy_cfg)
    report = gadget_survival_report(toy_program, variant, records, "main")
    assert report["total"] == 11
    # the classes stay in their blocks, the addresses move
    assert report["survived"] == 11
    assert sum(entry["address_valid"] for entry in report["gadgets"]) == 5
    assert report["by_class"]["Call"] == {"total": 1, "survived": 1, "address_valid": 1, "elimination_rate": 0.0}


def test_verify_accepts_equivalent_variants(toy_program, toy_cfg, plan):
    for k in range(2):
        variant = splice(toy_program, plan, k, toy_cfg)
        results = verify_variant(toy_program, variant, plan, k, seed=7, suite_size=8, fuzz_budget=300)
        assert set(results) == {"checksum", "copy_len", "scale"}
        assert all(entry["failures"] == 0 for entry in results.values())


def test_verify_catches_a_wrong_rewrite(toy_program, toy_cfg):
    wrong = {"checksum": [("xor %edx,%edx", "pop %rdi", "ret")]}
    plan = _plan(toy_cfg, wrong)
    variant = splice(toy_program, plan, 0, toy_cfg)
    results = verify_variant(toy_program, variant, plan, 0, seed=7, suite_size=8, fuzz_budget=300)
    assert results["checksum"]["failures"] > 0
