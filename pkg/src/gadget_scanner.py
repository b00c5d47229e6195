#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Gadget Scanner Module
Finds Change Register, Change Memory and Call gadgets in a CFG, derives the
Type R block list and checks whether a gadget's effect still holds.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass

from block_liveness import instruction_effects
from encoder import instruction_offsets
from errors import InvalidCount
from micro_emulator import run_block
from models.basic_block import TerminatorKind
from models.gadget import GadgetClass, GadgetKind, GadgetRecord
from models.instruction import GPR64, Instruction, Reg
from models.machine_state import MASK64, STACK_POINTER, MachineState

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 5
DEFAULT_RISKY_CALLEES = ("system", "execve", "execlp", "popen", "mprotect")

SENTINEL_STACK_WORDS = 16
_SENTINEL_BASE = 0x4141414100000000
_MARKER_BASE = 0x5A5A5A5A00000000

_GADGET_EXITS = (TerminatorKind.RET, TerminatorKind.JMP, TerminatorKind.CALL)


def callee_name(symbol):
    """system@PLT -> system"""
    if symbol is None:
        return None
    return symbol.split("@", 1)[0]


def _kills(instr, target):
    effects = instruction_effects(instr)
    return target in effects.writes and target not in effects.reads


def classify_sequence(seq):
    """
    Classify an instruction sequence ending in ret, jmp or call

    Args:
        seq: instruction list

    Returns:
        frozenset of GadgetClass, empty when the sequence is not a gadget
    """
    seq = list(seq)
    if not seq or not isinstance(seq[-1], Instruction) or seq[-1].mnemonic not in ("ret", "jmp", "call"):
        return frozenset()
    if any(not isinstance(instr, Instruction) for instr in seq):
        return frozenset()
    classes = set()
    body = seq[:-1]
    for position, instr in enumerate(body):
        target = None
        if instr.mnemonic == "pop" and isinstance(instr.operands[0], Reg) and instr.operands[0].register.width == 64:
            target = instr.operands[0].register.name
        elif instr.mnemonic in ("mov", "movabs") and instr.shape in ("ir", "mr"):
            dest = instr.operands[1].register
            if dest.width >= 32:
                target = dest.parent
        if target is not None and target != "rsp":
            if not any(_kills(later, target) for later in body[position + 1:]):
                classes.add(GadgetClass.change_register(target))
        if instr.mnemonic == "mov" and instr.shape == "rm":
            classes.add(GadgetClass.change_memory())
    last = seq[-1]
    if last.mnemonic == "call" and not last.is_indirect:
        classes.add(GadgetClass.call(callee_name(last.target)))
    return frozenset(classes)


def scan_gadgets(cfg, max_len=DEFAULT_MAX_LEN, risky_callees=DEFAULT_RISKY_CALLEES):
    """
    Scan every block for gadget suffixes plus risky direct calls

    Suffix records carry the register and memory classes; a direct call to
    a risky callee yields one Call record from the call-edge scanner.

    Returns:
        GadgetRecord list sorted by (block, index, class)
    """
    if max_len < 1:
        raise InvalidCount("max_len", max_len)
    risky = set(risky_callees)
    records = []
    for block in cfg.blocks:
        if not block.selectable or block.terminator.kind not in _GADGET_EXITS:
            continue
        instructions = block.instructions
        offsets = instruction_offsets(instructions)
        count = len(instructions)
        for start in range(max(count - max_len, block.clean_start), count):
            suffix = instructions[start:]
            for cls in classify_sequence(suffix):
                if cls.kind is GadgetKind.CALL:
                    continue
                records.append(GadgetRecord(block.id, start, cls, tuple(suffix), "suffix", block.label, offsets[start]))
        term = block.terminator
        if term.kind is TerminatorKind.CALL and not term.indirect and callee_name(term.target) in risky:
            records.append(GadgetRecord(
                block.id, count - 1, GadgetClass.call(callee_name(term.target)),
                (instructions[-1],), "cfg-call", block.label, offsets[count - 1],
            ))
    records.sort(key=lambda record: (record.block_id, record.index, record.gadget_class.key()))
    logger.info("found %d gadget records in %d blocks", len(records), len({r.block_id for r in records}))
    return records


@dataclass(frozen=True)
class GadgetFilter:
    """kinds and ChangeRegister targets to keep; None keeps everything"""

    kinds: tuple = None
    registers: tuple = None

    def accepts(self, record):
        cls = record.gadget_class
        if self.kinds is not None and cls.kind not in self.kinds:
            return False
        if self.registers is not None and cls.kind is GadgetKind.CHANGE_REGISTER:
            return cls.target in self.registers
        return True

    @classmethod
    def parse(cls, kinds=None, registers=None):
        """build from config strings like 'ChangeRegister,Call' and 'rdi,rsi'"""
        parsed_kinds = tuple(GadgetKind(kind) for kind in kinds) if kinds else None
        parsed_registers = tuple(registers) if registers else None
        return cls(parsed_kinds, parsed_registers)


def select_type_r(records, gadget_filter=None):
    """unique block ids holding a record that passes the filter, ascending"""
    gadget_filter = gadget_filter or GadgetFilter()
    return sorted({record.block_id for record in records if gadget_filter.accepts(record)})


def census_report(records, cfg):
    """
    Per class, register and callee counts of unique blocks and records

    Overlap between the two scanners is measured per block.
    """
    by_class = defaultdict(lambda: {"unique_blocks": set(), "total": 0})
    by_register = defaultdict(set)
    by_callee = defaultdict(lambda: {"unique_blocks": set(), "total": 0})
    by_scanner = defaultdict(set)
    for record in records:
        cls = record.gadget_class
        entry = by_class[cls.kind.value]
        entry["unique_blocks"].add(record.block_id)
        entry["total"] += 1
        if cls.kind is GadgetKind.CHANGE_REGISTER:
            by_register[cls.target].add(record.block_id)
        elif cls.kind is GadgetKind.CALL:
            by_callee[cls.callee]["unique_blocks"].add(record.block_id)
            by_callee[cls.callee]["total"] += 1
        by_scanner[record.source_scanner].add(record.block_id)

    def counts(table):
        return {name: {"unique_blocks": len(item["unique_blocks"]), "total": item["total"]}
                for name, item in sorted(table.items())}

    return {
        "overlap_criterion": "same-block",
        "blocks_total": len(cfg.blocks),
        "type_r_blocks": len(select_type_r(records)),
        "by_class": counts(by_class),
        "by_register": {
            name: len(blocks)
            for name, blocks in sorted(by_register.items(), key=lambda item: GPR64.index(item[0]))
        },
        "by_callee": counts(by_callee),
        "scanners": {
            "suffix": len(by_scanner["suffix"]),
            "cfg-call": len(by_scanner["cfg-call"]),
            "overlap": len(by_scanner["suffix"] & by_scanner["cfg-call"]),
        },
    }


def sentinel_word(k):
    """attacker-controlled stack word k above the gadget's entry rsp"""
    return _SENTINEL_BASE + k


def sentinel_state():
    """
    Machine state an attacker hands a gadget: distinct marker values in
    every register and sentinel words filling the stack above rsp
    """
    regs = [_MARKER_BASE + number for number in range(16)]
    regs[4] = STACK_POINTER
    state = MachineState(regs, footprint=((0, MASK64 + 1),))
    for k in range(SENTINEL_STACK_WORDS):
        state.write_memory(STACK_POINTER + 8 * k, 8, sentinel_word(k))
    return state


@dataclass(frozen=True)
class GadgetEffect:
    """Observable result of running a gadget from the sentinel state"""

    kind: GadgetKind
    value: int = None
    rsp: int = None
    writes: tuple = ()
    callee: str = None

    def to_dict(self):
        data = {"kind": self.kind.value}
        if self.value is not None:
            data["value"] = f"0x{self.value:x}"
        if self.rsp is not None:
            data["rsp_delta"] = self.rsp - STACK_POINTER
        if self.writes:
            data["writes"] = len(self.writes)
        if self.callee:
            data["callee"] = self.callee
        return data


def gadget_effect(seq, gadget_class):
    """
    Run a gadget from the sentinel state

    Returns:
        GadgetEffect, or None when the sequence does not end in a transfer
        or faults before reaching it
    """
    seq = tuple(seq)
    if not seq or not isinstance(seq[-1], Instruction) or seq[-1].mnemonic not in ("ret", "jmp", "call"):
        return None
    start = sentinel_state()
    result = run_block(start, seq)
    if not result.normal:
        return None
    final = result.state
    if gadget_class.kind is GadgetKind.CHANGE_REGISTER:
        return GadgetEffect(gadget_class.kind, value=final.get_reg(gadget_class.target), rsp=final.rsp)
    if gadget_class.kind is GadgetKind.CHANGE_MEMORY:
        writes = tuple(sorted(
            (address, byte) for address, byte in final.mem.items() if start.mem.get(address) != byte
        ))
        return GadgetEffect(gadget_class.kind, writes=writes)
    last = seq[-1]
    if last.mnemonic != "call" or last.is_indirect:
        return None
    return GadgetEffect(gadget_class.kind, callee=callee_name(last.target))


def gadget_holds(seq, gadget_class, expected=None):
    """
    Whether seq still acts as the given gadget

    Args:
        seq: instructions an attacker would execute from the gadget address
        gadget_class: class the attacker relies on
        expected: GadgetEffect of the original gadget; when omitted the
            class alone is checked (register changed, memory written, callee)

    Returns:
        bool
    """
    effect = gadget_effect(seq, gadget_class)
    if effect is None:
        return False
    if expected is not None:
        return effect == expected
    if gadget_class.kind is GadgetKind.CHANGE_REGISTER:
        return effect.value != _MARKER_BASE + GPR64.index(gadget_class.target)
    if gadget_class.kind is GadgetKind.CHANGE_MEMORY:
        return bool(effect.writes)
    return effect.callee == gadget_class.callee
