#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Encoder Module
Deterministic machine-code length model: one canonical encoding per
mnemonic and operand shape, with REX, ModRM/SIB and displacement rules.
"""

from bisect import bisect_left

from errors import UnsupportedInstruction
from models.instruction import CONDITION_CODES, SHIFTS, Imm, Instruction, Label, Mem, Reg, fits_signed

_ALU = ("add", "sub", "xor", "and", "or", "cmp")


def _modrm_length(op):
    """ModRM byte plus SIB and displacement bytes"""
    if isinstance(op, Reg):
        return 1
    if op.rip:
        return 1 + 4
    if op.base is None:
        return 1 + 1 + 4
    length = 1
    low = op.base.number & 7
    if op.index is not None or low == 4:
        length += 1
    if op.symbol:
        length += 4
    elif op.disp == 0 and low != 5:
        pass
    elif fits_signed(op.disp, 8):
        length += 1
    else:
        length += 4
    return length


def _needs_rex(instr, width):
    if width == 64 and instr.mnemonic not in ("push", "pop", "call", "jmp"):
        return True
    for op in instr.operands:
        if isinstance(op, Reg) and op.register.needs_rex:
            return True
        if isinstance(op, Mem) and any(reg.number >= 8 for reg in op.registers()):
            return True
    return False


def _immediate_size(width):
    return {8: 1, 16: 2}.get(width, 4)


def _is_accumulator(op):
    return isinstance(op, Reg) and op.register.number == 0


def instruction_length(instr):
    """
    Encoded length of one instruction in bytes

    Raises:
        UnsupportedInstruction: for anything that is not an Instruction
    """
    if not isinstance(instr, Instruction):
        raise UnsupportedInstruction(0, str(instr))
    m = instr.mnemonic
    ops = instr.operands
    if m in ("ret", "nop"):
        return 1
    if m in CONDITION_CODES:
        return 6
    if m in ("call", "jmp") and isinstance(ops[0], Label):
        return 5

    width = instr.width or 64
    length = 1 if width == 16 else 0
    if _needs_rex(instr, width):
        length += 1
    shape = instr.shape

    if m in ("call", "jmp", "inc", "dec", "neg", "not", "lea"):
        operand = ops[0]
        return length + 1 + _modrm_length(operand)
    if m == "push":
        if shape == "r":
            return length + 1
        if shape == "i":
            return length + (2 if fits_signed(ops[0].value, 8) else 5)
        return length + 1 + _modrm_length(ops[0])
    if m == "pop":
        if shape == "r":
            return length + 1
        return length + 1 + _modrm_length(ops[0])
    if m == "movabs":
        return length + 1 + 8
    if m == "mov":
        if shape == "ir":
            if width == 64:
                if fits_signed(ops[0].value, 32):
                    return length + 1 + 1 + 4
                return length + 1 + 8
            return length + 1 + _immediate_size(width)
        if shape == "im":
            return length + 1 + _modrm_length(ops[1]) + _immediate_size(width)
        memory = ops[1] if shape == "rm" else ops[0]
        return length + 1 + _modrm_length(memory)
    if m in SHIFTS:
        target = ops[-1]
        if shape in ("ir", "im") and ops[0].value != 1:
            return length + 1 + _modrm_length(target) + 1
        return length + 1 + _modrm_length(target)
    if m in _ALU or m == "test":
        if shape in ("ir", "im"):
            value = ops[0].value
            target = ops[1]
            if m == "test":
                if shape == "ir" and _is_accumulator(target):
                    return length + 1 + _immediate_size(width)
                return length + 1 + _modrm_length(target) + _immediate_size(width)
            if width == 8:
                if shape == "ir" and _is_accumulator(target):
                    return length + 1 + 1
                return length + 1 + _modrm_length(target) + 1
            if fits_signed(value, 8):
                return length + 1 + _modrm_length(target) + 1
            if shape == "ir" and _is_accumulator(target):
                return length + 1 + _immediate_size(width)
            return length + 1 + _modrm_length(target) + _immediate_size(width)
        memory = next((op for op in ops if isinstance(op, Mem)), ops[1])
        return length + 1 + _modrm_length(memory)
    raise UnsupportedInstruction(0, str(instr))


def encoded_length(seq):
    """total encoded length of an instruction sequence"""
    return sum(instruction_length(instr) for instr in seq)


def instruction_offsets(seq):
    """byte offset of each instruction from the start of the sequence"""
    offsets, position = [], 0
    for instr in seq:
        offsets.append(position)
        position += instruction_length(instr)
    return offsets


def instruction_at_offset(seq, offset):
    """index of the instruction starting exactly at offset, None if misaligned"""
    offsets = instruction_offsets(seq)
    position = bisect_left(offsets, offset)
    if position < len(offsets) and offsets[position] == offset:
        return position
    return None
