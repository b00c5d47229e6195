#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Micro Emulator Module
Executes instruction sequences of the supported subset over an explicit
machine state with ISA flag semantics, and compares projected results.
"""

import logging

from models.basic_block import BasicBlock, TerminatorKind
from models.instruction import (
    CONDITION_CODES, FLAGS, GPR64,
    Imm, Instruction, Reg, signed,
)
from models.machine_state import MASK64, ExecResult, Fault, FaultKind, MachineState
from utils.bit_ops import PARITY, mask, popcount

logger = logging.getLogger(__name__)

DEFAULT_FLAG_WEIGHT = 32

# return address pushed under the entry frame of whole-program runs
HALT_ADDRESS = 0x00DEAD00
_RETURN_BASE = 0x00C0DE00


class EmulationFault(Exception):
    def __init__(self, kind, detail=""):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail


def effective_address(state, mem):
    address = mem.disp
    if mem.symbol:
        if mem.symbol not in state.symbols:
            raise EmulationFault(FaultKind.OUT_OF_FOOTPRINT, f"unknown symbol {mem.symbol}")
        address += state.symbols[mem.symbol]
    if mem.base is not None:
        address += state.regs[mem.base.number]
    if mem.index is not None:
        address += state.regs[mem.index.number] * mem.scale
    return address & MASK64


def _read(state, op, width):
    if isinstance(op, Imm):
        return op.value & mask(width)
    if isinstance(op, Reg):
        return state.regs[op.register.number] & mask(op.register.width)
    address = effective_address(state, op)
    value = state.read_memory(address, width // 8)
    if value is None:
        raise EmulationFault(FaultKind.OUT_OF_FOOTPRINT, f"read of 0x{address:x}")
    return value


def _write(state, op, width, value):
    value &= mask(width)
    if isinstance(op, Reg):
        reg = op.register
        if reg.width >= 32:
            state.regs[reg.number] = value
        else:
            keep = MASK64 ^ mask(reg.width)
            state.regs[reg.number] = (state.regs[reg.number] & keep) | value
        if reg.number == 4 and not state.in_stack(state.regs[4]):
            raise EmulationFault(FaultKind.STACK_OVERFLOW, f"rsp left the stack: 0x{state.regs[4]:x}")
        return
    address = effective_address(state, op)
    if not state.write_memory(address, width // 8, value):
        raise EmulationFault(FaultKind.OUT_OF_FOOTPRINT, f"write of 0x{address:x}")


def _result_flags(state, result, width):
    state.flags["ZF"] = result == 0
    state.flags["SF"] = bool(result >> (width - 1))
    state.flags["PF"] = PARITY[result & 0xFF]


def _define(state, flags=FLAGS):
    state.undefined.difference_update(flags)


def _exec_mov(state, instr, width):
    _write(state, instr.operands[1], width, _read(state, instr.operands[0], width))


def _exec_lea(state, instr, width):
    _write(state, instr.operands[1], width, effective_address(state, instr.operands[0]))


def _exec_arith(state, instr, width):
    src, dst = instr.operands
    a = _read(state, dst, width)
    b = _read(state, src, width)
    top = 1 << (width - 1)
    m = instr.mnemonic
    if m == "add":
        result = (a + b) & mask(width)
        state.flags["CF"] = a + b > mask(width)
        state.flags["OF"] = bool((a ^ result) & (b ^ result) & top)
    else:
        result = (a - b) & mask(width)
        state.flags["CF"] = a < b
        state.flags["OF"] = bool((a ^ b) & (a ^ result) & top)
    _result_flags(state, result, width)
    _define(state)
    if m != "cmp":
        _write(state, dst, width, result)


def _exec_logic(state, instr, width):
    src, dst = instr.operands
    a = _read(state, dst, width)
    b = _read(state, src, width)
    m = instr.mnemonic
    if m in ("and", "test"):
        result = a & b
    elif m == "or":
        result = a | b
    else:
        result = a ^ b
    state.flags["CF"] = False
    state.flags["OF"] = False
    _result_flags(state, result, width)
    _define(state)
    if m != "test":
        _write(state, dst, width, result)


def _exec_unary(state, instr, width):
    dst = instr.operands[0]
    a = _read(state, dst, width)
    top = 1 << (width - 1)
    m = instr.mnemonic
    if m == "not":
        _write(state, dst, width, ~a)
        return
    if m == "inc":
        result = (a + 1) & mask(width)
        state.flags["OF"] = result == top
    elif m == "dec":
        result = (a - 1) & mask(width)
        state.flags["OF"] = a == top
    else:
        result = (-a) & mask(width)
        state.flags["CF"] = a != 0
        state.flags["OF"] = a == top
    _result_flags(state, result, width)
    _define(state, ("PF", "ZF", "SF", "OF") if m != "neg" else FLAGS)
    _write(state, dst, width, result)


def _exec_shift(state, instr, width):
    ops = instr.operands
    dst = ops[-1]
    count_op = ops[0] if len(ops) == 2 else Imm(1)
    count = _read(state, count_op, 8) & (0x3F if width == 64 else 0x1F)
    a = _read(state, dst, width)
    if count == 0:
        _write(state, dst, width, a)
        return
    m = instr.mnemonic
    undefined = []
    if m == "shl":
        result = (a << count) & mask(width)
        carry = (a >> (width - count)) & 1 if count <= width else None
    elif m == "shr":
        result = a >> count
        carry = (a >> (count - 1)) & 1 if count <= width else None
    else:
        value = signed(a, width)
        result = (value >> count) & mask(width)
        carry = (value >> (count - 1)) & 1 if count <= width else None
    if carry is None:
        undefined.append("CF")
    else:
        state.flags["CF"] = bool(carry)
    if count == 1:
        if m == "shl":
            state.flags["OF"] = bool(result >> (width - 1)) != state.flags["CF"]
        elif m == "shr":
            state.flags["OF"] = bool(a >> (width - 1))
        else:
            state.flags["OF"] = False
    else:
        undefined.append("OF")
    _result_flags(state, result, width)
    _define(state)
    state.undefined.update(undefined)
    _write(state, dst, width, result)


def _exec_push(state, instr, width):
    size = width // 8
    value = _read(state, instr.operands[0], width)
    top = (state.regs[4] - size) & MASK64
    if not state.in_stack(top, size):
        raise EmulationFault(FaultKind.STACK_OVERFLOW, f"push below the stack at 0x{top:x}")
    state.write_memory(top, size, value)
    state.regs[4] = top


def _exec_pop(state, instr, width):
    size = width // 8
    top = state.regs[4]
    if not state.in_stack(top, size):
        raise EmulationFault(FaultKind.STACK_OVERFLOW, f"pop outside the stack at 0x{top:x}")
    value = state.read_memory(top, size)
    if value is None:
        raise EmulationFault(FaultKind.OUT_OF_FOOTPRINT, f"read of 0x{top:x}")
    state.regs[4] = (top + size) & MASK64
    _write(state, instr.operands[0], width, value)


def _exec_nop(state, instr, width):
    pass


_HANDLERS = {
    "mov": _exec_mov,
    "movabs": _exec_mov,
    "lea": _exec_lea,
    "add": _exec_arith,
    "sub": _exec_arith,
    "cmp": _exec_arith,
    "and": _exec_logic,
    "or": _exec_logic,
    "xor": _exec_logic,
    "test": _exec_logic,
    "inc": _exec_unary,
    "dec": _exec_unary,
    "neg": _exec_unary,
    "not": _exec_unary,
    "shl": _exec_shift,
    "shr": _exec_shift,
    "sar": _exec_shift,
    "push": _exec_push,
    "pop": _exec_pop,
    "nop": _exec_nop,
}


def _execute(state, instr):
    if not isinstance(instr, Instruction):
        raise EmulationFault(FaultKind.UNSUPPORTED_INSTRUCTION, str(instr))
    handler = _HANDLERS.get(instr.mnemonic)
    if handler is None:
        raise EmulationFault(FaultKind.UNSUPPORTED_INSTRUCTION, instr.canonical())
    handler(state, instr, instr.width or 64)


def condition_holds(flags, mnemonic):
    """evaluate a conditional jump against a flag dict"""
    cf, zf, sf, of = flags["CF"], flags["ZF"], flags["SF"], flags["OF"]
    return {
        "je": zf, "jne": not zf,
        "jl": sf != of, "jge": sf == of,
        "jle": zf or sf != of, "jg": not zf and sf == of,
        "jb": cf, "jae": not cf,
        "jbe": cf or zf, "ja": not cf and not zf,
        "js": sf, "jns": not sf,
    }[mnemonic]


def step(state, instr):
    """
    Execute one non-control instruction

    Returns:
        a new MachineState, or a Fault
    """
    new_state = state.copy()
    try:
        _execute(new_state, instr)
    except EmulationFault as exc:
        return Fault(exc.kind, 0, exc.detail)
    return new_state


def run_block(state, block, fuel=None):
    """
    Execute a block straight-line

    The terminator is recorded in the path with its branch decision but is
    not followed.

    Args:
        state: input MachineState, left untouched
        block: BasicBlock or instruction sequence
        fuel: instruction budget, at least the block length

    Returns:
        ExecResult
    """
    instructions = block.instructions if isinstance(block, BasicBlock) else block
    if fuel is not None and fuel < len(instructions):
        raise ValueError(f"fuel {fuel} is below the block length {len(instructions)}")
    current = state.copy()
    path = []
    last = len(instructions) - 1
    for index, instr in enumerate(instructions):
        if isinstance(instr, Instruction) and instr.is_control:
            if index != last:
                fault = Fault(FaultKind.UNSUPPORTED_INSTRUCTION, index, "control transfer before block end")
                return ExecResult(None, fault, tuple(path))
            taken = condition_holds(current.flags, instr.mnemonic) if instr.mnemonic in CONDITION_CODES else True
            path.append((index, taken))
            break
        try:
            _execute(current, instr)
        except EmulationFault as exc:
            return ExecResult(None, Fault(exc.kind, index, exc.detail), tuple(path))
    return ExecResult(current, None, tuple(path))


def _default_external(state, callee):
    state.regs[0] = 0


def run_program(cfg, state, fuel=100000, externals=None):
    """
    Execute a whole program from its entry block

    Direct internal calls push a synthetic return address; external calls
    run a stub from externals (callee -> callable(state)) or clear rax.
    The run ends when the entry frame returns or a block falls off the end.

    Returns:
        ExecResult whose path lists (block id, taken) per executed block
    """
    from gadget_scanner import callee_name

    externals = externals or {}
    current = state.copy()
    top = (current.regs[4] - 8) & MASK64
    if not current.write_memory(top, 8, HALT_ADDRESS):
        return ExecResult(None, Fault(FaultKind.STACK_OVERFLOW, 0, "no room for the halt frame"))
    current.regs[4] = top
    return_sites = {}
    next_return = _RETURN_BASE
    block_id = cfg.entry
    path = []
    while True:
        block = cfg.block(block_id)
        if not block.diversifiable and not block.terminator.indirect:
            return ExecResult(None, Fault(FaultKind.UNSUPPORTED_INSTRUCTION, 0, block.label), tuple(path))
        fuel -= len(block.instructions)
        if fuel < 0:
            logger.warning("fuel exhausted in block %s", block.label)
            return ExecResult(None, Fault(FaultKind.UNSUPPORTED_INSTRUCTION, 0, "fuel exhausted"), tuple(path))
        result = run_block(current, block.instructions)
        if not result.normal:
            return ExecResult(None, result.fault, tuple(path))
        current = result.state
        term = block.terminator
        taken = result.path[-1][1] if result.path else True
        path.append((block.id, taken))
        if term.indirect:
            return ExecResult(None, Fault(FaultKind.UNSUPPORTED_INSTRUCTION, 0, "indirect transfer"), tuple(path))
        kind = term.kind
        if kind is TerminatorKind.RET:
            address = current.read_memory(current.regs[4], 8)
            current.regs[4] = (current.regs[4] + 8) & MASK64
            if address == HALT_ADDRESS:
                return ExecResult(current, None, tuple(path))
            if address not in return_sites:
                fault = Fault(FaultKind.OUT_OF_FOOTPRINT, 0, "return to an unknown address")
                return ExecResult(None, fault, tuple(path))
            block_id = return_sites.pop(address)
            continue
        if kind is TerminatorKind.CALL:
            callee = cfg.successor(block.id, "call")
            if callee is None:
                externals.get(callee_name(term.target), lambda s: _default_external(s, term.target))(current)
                block_id = term.fallthrough
            else:
                top = (current.regs[4] - 8) & MASK64
                if not current.write_memory(top, 8, next_return):
                    return ExecResult(None, Fault(FaultKind.STACK_OVERFLOW, 0, "call frame"), tuple(path))
                current.regs[4] = top
                return_sites[next_return] = term.fallthrough
                next_return += 0x10
                block_id = callee
            if block_id is None:
                return ExecResult(current, None, tuple(path))
            continue
        if kind is TerminatorKind.JMP:
            block_id = cfg.successor(block.id, "jump")
        elif kind is TerminatorKind.COND_JMP:
            block_id = cfg.successor(block.id, "taken") if taken else term.fallthrough
        else:
            block_id = term.fallthrough
        if block_id is None:
            if kind is TerminatorKind.FALLTHROUGH:
                return ExecResult(current, None, tuple(path))
            fault = Fault(FaultKind.OUT_OF_FOOTPRINT, 0, f"transfer to external {term.target}")
            return ExecResult(None, fault, tuple(path))


def register_indices(locations):
    """encoding-order indices of the registers among a location set"""
    return sorted(GPR64.index(loc) for loc in locations if isinstance(loc, str) and loc in GPR64)


def project_and_compare(a, b, on, check_flags, flag_weight=DEFAULT_FLAG_WEIGHT):
    """
    Hamming distance between two states projected on written locations

    Args:
        a, b: final states produced from the same input
        on: written locations (registers are compared; memory is compared
            byte-wise over every byte either state holds)
        check_flags: include the five status flags
        flag_weight: cost per differing flag

    Returns:
        non-negative distance, 0 iff the projections agree
    """
    distance = 0
    indices = on if isinstance(on, list) else register_indices(on)
    for index in indices:
        distance += popcount(a.regs[index] ^ b.regs[index])
    if a.mem != b.mem:
        for address in a.mem.keys() | b.mem.keys():
            left = a.mem.get(address)
            right = b.mem.get(address)
            if left is None or right is None:
                distance += 8
            elif left != right:
                distance += popcount(left ^ right)
    if check_flags:
        for flag in FLAGS:
            if flag in a.undefined or flag in b.undefined:
                continue
            if a.flags[flag] != b.flags[flag]:
                distance += flag_weight
    return distance


def memory_address(state, location):
    """concrete address of a symbolic MemLocation in a state"""
    address = location.disp
    if location.base:
        address += state.get_reg(location.base)
    if location.index:
        address += state.get_reg(location.index) * location.scale
    if location.symbol:
        address += state.symbols.get(location.symbol, 0)
    return address & MASK64
