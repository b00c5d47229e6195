#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Block Liveness Module
Localized def/use analysis of a single basic block: which registers,
flags and memory locations it reads before writing, and which it defines.
"""

import logging
from dataclasses import dataclass

from errors import UnsupportedInstruction
from models.basic_block import BasicBlock
from models.instruction import (
    BINARY_ALU, CONDITION_FLAGS, FLAGS, GPR64, SHIFTS,
    Imm, Instruction, Mem, Reg,
)
from models.live_set import LiveSet, MemLocation

logger = logging.getLogger(__name__)

_INC_DEC_FLAGS = ("PF", "ZF", "SF", "OF")


@dataclass(frozen=True)
class Effects:
    """per-instruction uses and definitions in execution order"""

    reads: tuple
    writes: tuple


def is_zero_idiom(instr):
    """xor r,r and sub r,r define r without reading it"""
    if instr.mnemonic not in ("xor", "sub") or instr.shape != "rr":
        return False
    return instr.operands[0].register == instr.operands[1].register


def _mem_location(op, width_bytes):
    return MemLocation(
        base=op.base.parent if op.base else None,
        index=op.index.parent if op.index else None,
        scale=op.scale if op.index else 1,
        disp=op.disp,
        symbol=op.symbol,
        width=width_bytes,
    )


def instruction_effects(instr):
    """
    Uses and definitions of one instruction

    Memory locations are expressed relative to register values just before
    the instruction executes. A write to an 8- or 16-bit register also reads
    its parent because the untouched bytes are merged.
    """
    m = instr.mnemonic
    ops = instr.operands
    width = instr.width or 64
    nbytes = width // 8
    reads, writes = [], []

    def address(op):
        reads.extend(reg.parent for reg in op.registers())

    def read(op, size=nbytes):
        if isinstance(op, Reg):
            reads.append(op.register.parent)
        elif isinstance(op, Mem):
            address(op)
            reads.append(_mem_location(op, size))

    def write(op, size=nbytes):
        if isinstance(op, Reg):
            if op.register.width < 32:
                reads.append(op.register.parent)
            writes.append(op.register.parent)
        elif isinstance(op, Mem):
            address(op)
            writes.append(_mem_location(op, size))

    if m in ("mov", "movabs"):
        read(ops[0])
        write(ops[1])
    elif m == "lea":
        address(ops[0])
        write(ops[1])
    elif m in BINARY_ALU:
        if not is_zero_idiom(instr):
            read(ops[0])
            read(ops[1])
        write(ops[1])
        writes.extend(FLAGS)
    elif m in ("cmp", "test"):
        read(ops[0])
        read(ops[1])
        writes.extend(FLAGS)
    elif m in ("inc", "dec"):
        read(ops[0])
        write(ops[0])
        writes.extend(_INC_DEC_FLAGS)
    elif m == "neg":
        read(ops[0])
        write(ops[0])
        writes.extend(FLAGS)
    elif m == "not":
        read(ops[0])
        write(ops[0])
    elif m in SHIFTS:
        target = ops[-1]
        count = ops[0] if len(ops) == 2 else Imm(1)
        read(target)
        write(target)
        if isinstance(count, Reg):
            reads.append("rcx")
            # a zero count leaves every flag untouched
            reads.extend(FLAGS)
            writes.extend(FLAGS)
        elif count.value & (0x3F if width == 64 else 0x1F):
            writes.extend(FLAGS)
    elif m == "push":
        reads.append("rsp")
        read(ops[0])
        writes.append("rsp")
        writes.append(MemLocation(base="rsp", disp=-nbytes, width=nbytes))
    elif m == "pop":
        reads.append("rsp")
        reads.append(MemLocation(base="rsp", disp=0, width=nbytes))
        writes.append("rsp")
        write(ops[0])
    elif m in CONDITION_FLAGS:
        reads.extend(CONDITION_FLAGS[m])
    elif m in ("call", "jmp") and instr.is_indirect:
        read(ops[0], 8)
    return Effects(tuple(dict.fromkeys(reads)), tuple(dict.fromkeys(writes)))


def _register_step(instr, reg):
    """constant change instr makes to a 64-bit register, None when not constant"""
    m = instr.mnemonic
    ops = instr.operands
    width = instr.width or 64
    if reg == "rsp" and m == "push":
        return -(width // 8)
    if m == "pop":
        loaded = isinstance(ops[0], Reg) and ops[0].register.parent == reg
        if loaded:
            return None
        if reg == "rsp":
            return width // 8
    if reg not in instruction_effects(instr).writes:
        return 0
    if width != 64:
        return None
    if m in ("add", "sub") and instr.shape == "ir":
        return ops[0].value if m == "add" else -ops[0].value
    if m in ("inc", "dec") and instr.shape == "r":
        return 1 if m == "inc" else -1
    if m == "lea" and isinstance(ops[1], Reg):
        source = ops[0]
        if source.base and source.base.parent == reg and source.index is None and source.symbol is None:
            return source.disp
    return None


def _advance(instr, deltas):
    """entry-relative register offsets after instr; None once a value is unknown"""
    for reg in instruction_effects(instr).writes:
        if not isinstance(reg, str) or reg not in GPR64:
            continue
        step = _register_step(instr, reg)
        deltas[reg] = None if step is None or deltas[reg] is None else deltas[reg] + step


def compute_live_sets(block):
    """
    Compute the live-in and defined locations of a block

    Memory locations are relative to register values at block entry. A base
    or index register moved by a constant (push, pop, add/sub immediate,
    inc, dec, lea on itself) shifts the displacement; any other write makes
    the register unknown, the location stays at its entry-relative address
    and may_alias is set.

    Args:
        block: BasicBlock or instruction sequence

    Returns:
        LiveSet

    Raises:
        UnsupportedInstruction: the block holds opaque lines
    """
    if isinstance(block, BasicBlock):
        if not block.diversifiable and not block.terminator.indirect:
            raise UnsupportedInstruction(block.span[0], block.label)
        instructions = block.instructions
    else:
        instructions = tuple(block)
    for instr in instructions:
        if not isinstance(instr, Instruction):
            raise UnsupportedInstruction(0, str(instr))

    reads, writes, defined = [], [], set()
    deltas = dict.fromkeys(GPR64, 0)
    may_alias = False

    def rebase(loc):
        nonlocal may_alias
        if not isinstance(loc, MemLocation):
            return loc
        disp = loc.disp
        for reg, scale in ((loc.base, 1), (loc.index, loc.scale)):
            if reg is None:
                continue
            if deltas.get(reg) is None:
                may_alias = True
            else:
                disp += deltas[reg] * scale
        return MemLocation(loc.base, loc.index, loc.scale, disp, loc.symbol, loc.width)

    for instr in instructions:
        effects = instruction_effects(instr)
        for loc in effects.reads:
            loc = rebase(loc)
            if loc not in defined and loc not in reads:
                reads.append(loc)
        pending = [rebase(loc) for loc in effects.writes]
        _advance(instr, deltas)
        for loc in pending:
            defined.add(loc)
            if loc not in writes:
                writes.append(loc)

    bases = {(loc.base, loc.symbol) for loc in reads + writes if isinstance(loc, MemLocation)}
    if len(bases) > 1:
        may_alias = True
    live = LiveSet(frozenset(reads), frozenset(writes), may_alias)
    logger.debug("live set: %s", live.to_dict())
    return live
