#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Diversifier Module
Splices block rewrites back into the program, emits firmware variants and
judges how many gadgets and payloads survive diversification.
"""

import logging
from collections import defaultdict

from asm_parser import parse_program, render_program
from block_liveness import compute_live_sets
from cfg_builder import block_at, build_cfg
from encoder import encoded_length, instruction_at_offset, instruction_offsets
from errors import InvalidCount, NotFound, SizeRegression, SpliceConflict, UnresolvableGadget
from gadget_scanner import DEFAULT_MAX_LEN, classify_sequence, gadget_effect, gadget_holds
from micro_emulator import project_and_compare, run_block
from models.basic_block import TerminatorKind
from models.diversity import GadgetVerdict, PayloadVerdict, ResolvedGadget
from models.instruction import Instruction, Program
from storage_manager import checksum
from testgen import build_suite
from utils.bit_ops import derive_seed

logger = logging.getLogger(__name__)

TYPE_M_CAVEAT = (
    "Type M blocks are rewritten like Type R blocks; rewriting the calling block "
    "does not move a vulnerable stack buffer addressed at a fixed frame offset."
)


def _check_plan(cfg, plan):
    spans = []
    for block_id, rewrites in plan.selections.items():
        block = cfg.block(block_id)
        for candidate in rewrites:
            if not candidate.validated:
                raise ValueError(f"rewrite of block {block.label} is not validated")
            if candidate.restored and block.terminator_instruction is not None \
                    and candidate.restored[-1].canonical() != block.terminator_instruction.canonical():
                raise ValueError(f"rewrite of block {block.label} does not keep its exit")
        spans.append((block.span, block.label))
    spans.sort()
    for (first, label), (second, other) in zip(spans, spans[1:]):
        if second[0] <= first[1]:
            raise SpliceConflict(f"blocks {label} and {other} overlap")


def _anchor(block, rewrite, original_lines):
    """
    Interleave the block's own labels, comments and directives with the
    rewrite, each kept at the byte offset it had in the original block
    """
    offsets = instruction_offsets(block.instructions)
    new_offsets = instruction_offsets(rewrite)
    anchored = []
    position = 0
    for line in original_lines:
        if isinstance(line, Instruction):
            position += 1
            continue
        at = offsets[position] if position < len(offsets) else encoded_length(block.instructions)
        anchored.append((at, line))

    # nothing may land after the exit, or it would start a new block
    limit = len(rewrite) - 1 if rewrite and rewrite[-1].is_control else len(rewrite)
    out = []
    cursor = 0
    for at, line in anchored:
        while cursor < limit and new_offsets[cursor] < at:
            out.append(rewrite[cursor])
            cursor += 1
        out.append(line)
    out.extend(rewrite[cursor:])
    return out


def splice(program, plan, variant=0, cfg=None):
    """
    Replace each diversified block by the rewrite the plan picks for variant

    Args:
        program: original Program
        plan: DiversityPlan built on this program
        variant: firmware variant index
        cfg: CFG of program under plan.entry, built when omitted

    Returns:
        Program

    Raises:
        SpliceConflict: two selections cover overlapping lines
    """
    choices = plan.choices(variant)
    if not choices:
        return program
    cfg = cfg or build_cfg(program, plan.entry)
    _check_plan(cfg, plan)
    lines = list(program.lines)
    # back to front so earlier spans keep their indices
    for block_id in sorted(choices, key=lambda bid: cfg.block(bid).span[0], reverse=True):
        block = cfg.block(block_id)
        candidate = plan.selections[block_id][choices[block_id]]
        start, end = block.span
        lines[start:end + 1] = _anchor(block, tuple(candidate.restored), lines[start:end + 1])
    return Program(tuple(lines))


def modeled_length(program):
    """encoded length of every instruction the length model covers"""
    return encoded_length(program.instructions())


def emit_firmware_rewrites(program, plan, n, store):
    """
    Write n firmware variants and their manifest

    Args:
        program: original Program
        plan: DiversityPlan
        n: number of variants
        store: ArtifactStore

    Returns:
        manifest dict, also written as manifest.json

    Raises:
        InvalidCount: n < 1
        SizeRegression: a variant encodes longer than the original
    """
    if n < 1:
        raise InvalidCount("n", n)
    warnings = []
    available = plan.min_available()
    if plan and n > available:
        message = f"{n} variants requested but some blocks have only {available} rewrite(s); choices cycle"
        logger.warning(message)
        warnings.append(message)

    cfg = build_cfg(program, plan.entry) if plan else None
    original_text = render_program(program)
    original_length = modeled_length(program)
    variants = []
    for k in range(n):
        variant = splice(program, plan, k, cfg)
        text = render_program(variant)
        reparsed = parse_program(text)
        length = modeled_length(reparsed)
        if length > original_length:
            raise SizeRegression(f"variant {k} encodes to {length} bytes, original {original_length}")
        if cfg is not None and not build_cfg(reparsed, plan.entry).is_isomorphic_to(cfg):
            logger.warning("variant %d does not keep the original control flow", k)
            warnings.append(f"variant {k}: control flow differs from the original")
        name = f"variant_{k}.s"
        digest = store.write_asm(name, text)
        variants.append({
            "variant": k,
            "file": name,
            "checksum": digest,
            "length": length,
            "choices": {plan.labels.get(bid) or str(bid): index for bid, index in sorted(plan.choices(k).items())},
        })
        logger.info("wrote %s (%d blocks diversified)", name, len(plan.choices(k)))

    manifest = {
        "seed": plan.seed,
        "entry": plan.entry,
        "strategy": plan.strategy.value,
        "original": {"checksum": checksum(original_text), "length": original_length},
        "variants": variants,
        "warnings": warnings,
    }
    store.write_json("manifest.json", manifest)
    return manifest


def _suffix_classes(block, max_len):
    classes = set()
    count = len(block.instructions)
    for start in range(max(count - max_len, block.clean_start), count):
        classes |= classify_sequence(block.instructions[start:])
    return classes


def gadget_survival_report(original, variant, records, entry, max_len=DEFAULT_MAX_LEN):
    """
    Re-classify every recorded gadget at its block in the variant

    A gadget survives when its class is still found among the suffixes of
    the variant block at most max_len instructions long, the same window
    the scanner uses. address_valid additionally says
    whether the original byte offset still starts an instruction that acts
    as the gadget.

    Args:
        original: Program the records were scanned on
        variant: diversified Program
        records: GadgetRecord list of original
        entry: entry symbol
        max_len: longest suffix checked, the scanner setting

    Returns:
        report dict
    """
    variant_cfg = build_cfg(variant, entry)
    original_cfg = build_cfg(original, entry)
    per_class = defaultdict(lambda: {"total": 0, "survived": 0, "address_valid": 0})
    entries = []
    class_cache = {}
    for record in records:
        label = record.block_label or original_cfg.block(record.block_id).label
        block = variant_cfg.block_for_label(label)
        survived = False
        address_valid = False
        if block is not None:
            if block.id not in class_cache:
                class_cache[block.id] = _suffix_classes(block, max_len)
            survived = record.gadget_class in class_cache[block.id]
            index = instruction_at_offset(block.instructions, record.offset)
            if index is not None:
                expected = gadget_effect(record.sequence, record.gadget_class)
                address_valid = gadget_holds(block.instructions[index:], record.gadget_class, expected)
        stats = per_class[record.gadget_class.kind.value]
        stats["total"] += 1
        stats["survived"] += survived
        stats["address_valid"] += address_valid
        entries.append({
            "block_label": label,
            "offset": record.offset,
            "class": record.gadget_class.key(),
            "survived": survived,
            "address_valid": address_valid,
        })

    total = len(records)
    survived_total = sum(item["survived"] for item in entries)
    for stats in per_class.values():
        stats["elimination_rate"] = 1.0 - stats["survived"] / stats["total"]
    return {
        "total": total,
        "survived": survived_total,
        "elimination_rate": (1.0 - survived_total / total) if total else 0.0,
        "by_class": dict(sorted(per_class.items())),
        "gadgets": entries,
    }


def _resolve(cfg, index, gadget):
    try:
        block, how = block_at(cfg, gadget.label)
    except NotFound:
        return None
    start = 0 if how == "exact" else block.interior_index(gadget.label)
    sequence = tuple(block.instructions[start:])
    return ResolvedGadget(
        index=index,
        label=gadget.label,
        gadget_class=gadget.gadget_class,
        block_label=block.label,
        offset=instruction_offsets(block.instructions)[start],
        sequence=sequence,
        expected=gadget_effect(sequence, gadget.gadget_class),
    )


def resolve_payload(cfg, payload, strict=True):
    """
    Pin every payload gadget to (block label, byte offset) in the program

    Args:
        cfg: Cfg of the original program
        payload: PayloadSpec
        strict: raise on an unresolvable label instead of keeping None

    Returns:
        ResolvedGadget list in chain order, None for unresolvable labels
        when not strict

    Raises:
        UnresolvableGadget: a label does not name an instruction
    """
    resolved = []
    for index, gadget in enumerate(payload.gadgets):
        item = _resolve(cfg, index, gadget)
        if item is None and strict:
            raise UnresolvableGadget(gadget.label)
        resolved.append(item)
    return resolved


def _gadget_verdict(cfg, index, gadget, pinned, exact=True):
    if pinned is None:
        return GadgetVerdict(index, gadget.label, False, "unresolvable")
    block = cfg.block_for_label(pinned.block_label)
    if block is None:
        return GadgetVerdict(index, gadget.label, False, "unresolvable")
    at = instruction_at_offset(block.instructions, pinned.offset)
    if at is None:
        return GadgetVerdict(index, gadget.label, False, "misaligned")
    if exact and pinned.expected is None:
        return GadgetVerdict(index, gadget.label, False, "no effect in the original")
    # self-resolved gadgets are judged by class only
    expected = pinned.expected if exact else None
    if not gadget_holds(block.instructions[at:], pinned.gadget_class, expected):
        return GadgetVerdict(index, gadget.label, False, "effect changed" if exact else "class not met")
    return GadgetVerdict(index, gadget.label, True)


def payload_check(variant, payload, entry, resolved=None):
    """
    Run every gadget of a payload against a program variant

    Args:
        variant: Program to attack
        payload: PayloadSpec
        entry: entry symbol
        resolved: ResolvedGadget list from the original program; when
            omitted the payload is resolved against variant itself, each
            gadget only has to meet its class and an unresolvable label
            counts as a broken gadget

    Returns:
        PayloadVerdict, feasible only when every gadget holds
    """
    cfg = build_cfg(variant, entry)
    exact = resolved is not None
    pinned = list(resolved) if exact else resolve_payload(cfg, payload, strict=False)
    verdicts = [
        _gadget_verdict(cfg, index, gadget, pinned[index], exact)
        for index, gadget in enumerate(payload.gadgets)
    ]
    broken = [verdict.index for verdict in verdicts if not verdict.holds]
    return PayloadVerdict(feasible=not broken, first_broken=broken[0] if broken else None, verdicts=verdicts)


def payload_fleet_report(variants, payload, entry, resolved):
    """
    Payload verdicts across a fleet of variants

    Args:
        variants: name -> Program
        resolved: ResolvedGadget list from the original program

    Returns:
        dict with the feasible count and one verdict per variant
    """
    verdicts = {name: payload_check(program, payload, entry, resolved) for name, program in sorted(variants.items())}
    return {
        "total": len(verdicts),
        "feasible": sum(verdict.feasible for verdict in verdicts.values()),
        "variants": {name: verdict.to_dict() for name, verdict in verdicts.items()},
    }


def _decisions(result):
    return [taken for _, taken in result.path]


def verify_variant(original, variant, plan, k, seed=0, suite_size=32, fuzz_budget=5000):
    """
    Re-run every spliced block of one variant on a fresh suite

    Expectations come from the original block; the variant block must match
    them on every register and memory byte, on flags when it ends in a
    conditional jump, and on the exit decision.

    Returns:
        dict label -> {"cases", "failures"}
    """
    original_cfg = build_cfg(original, plan.entry)
    variant_cfg = build_cfg(variant, plan.entry)
    results = {}
    for block_id in sorted(plan.choices(k)):
        block = original_cfg.block(block_id)
        rewritten = variant_cfg.block_for_label(block.label)
        live = compute_live_sets(block)
        suite = build_suite(block, live, suite_size, seed=derive_seed(seed, "verify", k, block_id),
                            fuzz_budget=fuzz_budget)
        check_flags = block.terminator.kind is TerminatorKind.COND_JMP
        failures = 0
        for case in suite:
            result = run_block(case.input, rewritten.instructions) if rewritten is not None else None
            if result is None or not result.normal or _decisions(result) != _decisions(case.expected):
                failures += 1
            elif project_and_compare(case.expected.state, result.state, list(range(16)), check_flags):
                failures += 1
        results[block.label] = {"cases": len(suite), "failures": failures}
        if failures:
            logger.warning("variant %d block %s fails %d of %d fresh cases", k, block.label, failures, len(suite))
    return results
