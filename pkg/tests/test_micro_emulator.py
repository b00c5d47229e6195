#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import random

import pytest

from asm_parser import parse_instruction
from micro_emulator import condition_holds, project_and_compare, run_block, run_program, step
from models.instruction import FLAGS
from models.machine_state import MASK64, STACK_REGION, FaultKind, MachineState

COUNTER_BODY = ("sub $0x1,%rax", "add $0x1,%rdx", "test %rdx,%rdx", "je L")


def _seq(*texts):
    return [parse_instruction(text) for text in texts]


def _state(flags=None, footprint=(), **regs):
    state = MachineState(flags=flags, footprint=footprint)
    for name, value in regs.items():
        state.set_reg(name, value)
    return state


def test_test_of_zero_sets_zf_and_clears_cf_of():
    start = _state(flags={"CF": True, "PF": False, "ZF": False, "SF": True, "OF": True}, rdx=0)
    result = step(start, parse_instruction("test %rdx,%rdx"))
    assert result.flags["ZF"]
    assert not result.flags["CF"]
    assert not result.flags["OF"]
    assert not result.flags["SF"]
    assert start.flags["CF"]


def test_xor_self_clears_the_register():
    result = step(_state(rax=0x1234, rbx=7), parse_instruction("xor %rax,%rax"))
    assert result.get_reg("rax") == 0
    assert result.flags["ZF"] and not result.flags["CF"] and not result.flags["OF"]
    assert result.get_reg("rbx") == 7


def test_inc_wraps_and_keeps_carry():
    start = _state(flags={flag: flag == "CF" for flag in FLAGS}, rdx=MASK64)
    result = step(start, parse_instruction("inc %rdx"))
    assert result.get_reg("rdx") == 0
    assert result.flags["ZF"]
    assert result.flags["CF"]


def test_sub_borrows():
    result = step(_state(rax=0), parse_instruction("sub $0x1,%rax"))
    assert result.get_reg("rax") == MASK64
    assert result.flags["CF"] and result.flags["SF"] and not result.flags["ZF"]


def test_32bit_write_zero_extends():
    result = step(_state(rax=MASK64), parse_instruction("mov $0x1,%eax"))
    assert result.get_reg("rax") == 1


def test_8bit_write_merges():
    result = step(_state(rax=0x1122334455667788), parse_instruction("mov $0x0,%al"))
    assert result.get_reg("rax") == 0x1122334455667700


def test_counter_block():
    result = run_block(_state(rax=5, rdx=0), _seq(*COUNTER_BODY))
    assert result.normal
    assert result.state.get_reg("rax") == 4
    assert result.state.get_reg("rdx") == 1
    assert not result.state.flags["ZF"]
    assert result.path == ((3, False),)


def test_empty_sequence_keeps_the_state():
    start = _state(rcx=9)
    result = run_block(start, [])
    assert result.normal
    assert result.state == start
    assert result.path == ()


def test_read_outside_the_footprint_faults():
    result = run_block(_state(rdi=0x1000), _seq("mov (%rdi),%rax", "ret"))
    assert result.fault.kind is FaultKind.OUT_OF_FOOTPRINT
    assert result.fault.at == 0
    assert result.state is None
    assert "fault" in result.to_dict()


def test_write_inside_the_footprint():
    start = _state(footprint=((0x1000, 0x1008),), rdi=0x1000, rax=0xAB)
    result = run_block(start, _seq("mov %rax,(%rdi)", "mov %rax,0x8(%rdi)"))
    assert result.fault.kind is FaultKind.OUT_OF_FOOTPRINT
    assert result.fault.at == 1
    ok = run_block(start, _seq("mov %rax,(%rdi)", "mov (%rdi),%rcx"))
    assert ok.state.get_reg("rcx") == 0xAB


def test_push_below_the_stack_faults():
    result = run_block(_state(rsp=STACK_REGION[0]), _seq("push %rax"))
    assert result.fault.kind is FaultKind.STACK_OVERFLOW


def test_push_pop_round_trip():
    result = run_block(_state(rax=0x42), _seq("push %rax", "pop %rcx"))
    assert result.state.get_reg("rcx") == 0x42
    assert result.state.rsp == MachineState().rsp


def test_control_transfer_inside_a_block_faults():
    result = run_block(_state(), _seq("ret", "nop"))
    assert result.fault.kind is FaultKind.UNSUPPORTED_INSTRUCTION


def test_fuel_below_block_length():
    with pytest.raises(ValueError):
        run_block(_state(), _seq("nop", "nop"), fuel=1)


def test_run_block_is_deterministic():
    start = _state(rax=0x1F, rdx=3)
    assert run_block(start, _seq(*COUNTER_BODY)) == run_block(start, _seq(*COUNTER_BODY))


@pytest.mark.parametrize("mnemonic, flags, taken", [
    ("je", {"ZF": True}, True),
    ("jne", {"ZF": True}, False),
    ("jl", {"SF": True, "OF": False}, True),
    ("jge", {"SF": True, "OF": True}, True),
    ("jbe", {"CF": False, "ZF": False}, False),
    ("ja", {"CF": False, "ZF": False}, True),
])
def test_condition_holds(mnemonic, flags, taken):
    full = {flag: False for flag in FLAGS}
    full.update(flags)
    assert condition_holds(full, mnemonic) == taken


def test_project_and_compare():
    a = _state(rax=3)
    assert project_and_compare(a, a.copy(), {"rax"}, check_flags=True) == 0
    b = a.copy()
    b.flags["ZF"] = True
    assert project_and_compare(a, b, {"rax"}, check_flags=False) == 0
    assert project_and_compare(a, b, {"rax"}, check_flags=True) == 32
    assert project_and_compare(a, b, {"rax"}, check_flags=True, flag_weight=5) == 5
    c = a.copy()
    c.set_reg("rax", 0)
    c.set_reg("rcx", 1)
    assert project_and_compare(a, c, {"rax"}, check_flags=False) == 2
    assert project_and_compare(a, c, {"rax", "rcx"}, check_flags=False) == 3


def test_undefined_flags_are_not_compared():
    a = run_block(_state(rax=1), _seq("shl $0x3,%rax")).state
    b = a.copy()
    b.flags["OF"] = not a.flags["OF"]
    assert "OF" in a.undefined
    assert project_and_compare(a, b, {"rax"}, check_flags=True) == 0


@pytest.mark.parametrize("rsi, path", [
    (0, [0, 1, 5, 6, 2, 3, 8, 9, 4]),
    (0xFFFFFFFC, [0, 1, 5, 7, 2, 4]),
])
def test_toy_program_paths(toy_cfg, rsi, path):
    result = run_program(toy_cfg, _state(rsi=rsi))
    assert result.normal
    assert [block_id for block_id, _ in result.path] == path


def test_external_stubs(toy_cfg):
    seen = []
    result = run_program(toy_cfg, _state(), externals={"system": lambda state: seen.append(state.get_reg("rdi"))})
    assert result.normal
    assert len(seen) == 1
    assert seen[0] == MachineState().rsp - 8 - 0x48


DESTINATION = {8: "al", 16: "ax", 32: "eax", 64: "rax"}
SOURCE = {8: "bl", 16: "bx", 32: "ebx", 64: "rbx"}
BINARY = ("add", "sub", "cmp", "and", "or", "xor", "test")
UNARY = ("inc", "dec", "neg")
SHIFTS = ("shl", "shr", "sar")
CROSS_CHECK_PAIRS = 25000


def _to_signed(value, width):
    return value - (1 << width) if value >> (width - 1) else value


def _reference(mnemonic, width, a, b, flags):
    """
    Result and flags of one ALU operation as the architecture manual words them

    Returns:
        (result or None when nothing is written, flags, undefined flags)
    """
    size = 1 << width
    low, high = -(size >> 1), (size >> 1) - 1
    sa, sb = _to_signed(a, width), _to_signed(b, width)
    flags = dict(flags)
    undefined = set()
    if mnemonic in ("add", "sub", "cmp"):
        exact = sa + sb if mnemonic == "add" else sa - sb
        result = (a + b) % size if mnemonic == "add" else (a - b) % size
        flags["CF"] = a + b >= size if mnemonic == "add" else b > a
        flags["OF"] = not low <= exact <= high
    elif mnemonic in ("and", "or", "xor", "test"):
        result = {"and": a & b, "test": a & b, "or": a | b, "xor": a ^ b}[mnemonic]
        flags["CF"] = flags["OF"] = False
    elif mnemonic in UNARY:
        exact = {"inc": sa + 1, "dec": sa - 1, "neg": -sa}[mnemonic]
        result = exact % size
        flags["OF"] = not low <= exact <= high
        if mnemonic == "neg":
            flags["CF"] = a != 0
    else:
        count = b & (0x3F if width == 64 else 0x1F)
        if count == 0:
            return a, flags, undefined
        if mnemonic == "shl":
            result = (a << count) % size
            carry = (a << count) >> width & 1
        elif mnemonic == "shr":
            result = a >> count
            carry = a >> (count - 1) & 1
        else:
            result = (sa >> count) % size
            carry = sa >> (count - 1) & 1
        if count <= width:
            flags["CF"] = bool(carry)
        else:
            undefined.add("CF")
        if count == 1:
            flags["OF"] = {
                "shl": bool(result >> (width - 1)) != flags["CF"],
                "shr": bool(a >> (width - 1)),
                "sar": False,
            }[mnemonic]
        else:
            undefined.add("OF")
    flags["ZF"] = result == 0
    flags["SF"] = result >= size >> 1
    flags["PF"] = bin(result & 0xFF).count("1") % 2 == 0
    written = None if mnemonic in ("cmp", "test") else result
    return written, flags, undefined


def _merge(full, value, width):
    if width >= 32:
        return value
    return full & ~((1 << width) - 1) & MASK64 | value


def _operand(rng, width):
    top = 1 << (width - 1)
    edges = (0, 1, 2, top - 1, top, top + 1, (1 << width) - 2, (1 << width) - 1)
    high = rng.getrandbits(64) & ~((1 << width) - 1) & MASK64
    if rng.random() < 0.25:
        return high | rng.choice(edges)
    return rng.getrandbits(64)


def _text(mnemonic, width):
    if mnemonic in BINARY:
        return f"{mnemonic} %{SOURCE[width]},%{DESTINATION[width]}"
    if mnemonic in SHIFTS:
        return f"{mnemonic} %cl,%{DESTINATION[width]}"
    return f"{mnemonic} %{DESTINATION[width]}"


@pytest.mark.slow
@pytest.mark.parametrize("width", [8, 16, 32, 64])
@pytest.mark.parametrize("mnemonic", BINARY + UNARY + SHIFTS)
def test_flags_match_the_reference_semantics(mnemonic, width):
    instr = parse_instruction(_text(mnemonic, width))
    rng = random.Random(f"{mnemonic}-{width}")
    for _ in range(CROSS_CHECK_PAIRS):
        start = _state(flags={flag: rng.random() < 0.5 for flag in FLAGS}, rax=_operand(rng, width),
                       rbx=_operand(rng, width), rcx=rng.getrandbits(64))
        a = start.get_reg("rax") & ((1 << width) - 1)
        b = (start.get_reg("rcx") & 0xFF) if mnemonic in SHIFTS else start.get_reg("rbx") & ((1 << width) - 1)
        written, flags, undefined = _reference(mnemonic, width, a, b, start.flags)

        result = step(start, instr)
        case = f"{instr.canonical()} a=0x{a:x} b=0x{b:x}"
        expected_regs = list(start.regs)
        if written is not None:
            expected_regs[0] = _merge(start.regs[0], written, width)
        assert list(result.regs) == expected_regs, case
        assert result.undefined == undefined, case
        for flag in FLAGS:
            if flag not in undefined:
                assert result.flags[flag] == flags[flag], f"{case} {flag}"
