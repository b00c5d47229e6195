#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import pytest

from asm_parser import parse_instruction, parse_number, parse_program, render_program
from errors import AsmSyntaxError, UnsupportedInstruction
from models.instruction import Imm, Instruction, Label, LabelLine, Mem, OpaqueLine, Reg

ADD_JE_SOURCE = "add $0x4, %eax\n test %eax, %eax\n je L1"


def test_add_je_block_parses_to_three_instructions():
    program = parse_program(ADD_JE_SOURCE)
    instructions = program.instructions()
    assert [instr.mnemonic for instr in instructions] == ["add", "test", "je"]
    assert instructions[0].operands[0] == Imm(4)
    assert isinstance(instructions[0].operands[1], Reg)
    assert instructions[0].operands[1].register.name == "eax"
    assert instructions[-1].is_conditional
    assert instructions[-1].operands == (Label("L1"),)


def test_empty_source_is_empty_program():
    program = parse_program("")
    assert program.lines == ()
    assert program.symbols == {}
    assert render_program(program) == ""


def test_unknown_mnemonic_is_opaque_unless_strict():
    program = parse_program("f:\n\tfrob %rax\n\tret\n")
    assert isinstance(program.lines[1], OpaqueLine)
    assert program.lines[1].kind == "instruction"
    with pytest.raises(UnsupportedInstruction) as exc:
        parse_program("f:\n\tfrob %rax\n", strict=True)
    assert exc.value.line == 2


def test_render_single_ret():
    program = parse_program("ret")
    assert render_program(program) == "ret\n"


def test_add_je_round_trip_keeps_order_and_labels():
    rendered = render_program(parse_program(ADD_JE_SOURCE))
    assert rendered == "add $0x4,%eax\ntest %eax,%eax\nje L1\n"
    assert render_program(parse_program(rendered)) == rendered


def _corpus():
    regs64 = ("rax", "rcx", "rdx", "rbx", "rsi", "rdi", "r8", "r12")
    regs32 = ("eax", "ecx", "edx", "ebx", "esi", "edi", "r8d", "r12d")
    lines = []
    for mnemonic in ("mov", "add", "sub", "xor", "and", "or", "cmp", "test"):
        for regs in (regs64, regs32):
            for src in regs[:4]:
                for dst in regs[2:]:
                    lines.append(f"{mnemonic}\t%{src}, %{dst}")
            for value in ("0", "1", "0x7f", "-8", "0x1000"):
                lines.append(f"{mnemonic} ${value},%{regs[-1]}")
        lines.append(f"{mnemonic}q 0x10(%rsp,%rcx,8),%rax")
        lines.append(f"{mnemonic} %rdx,-0x8(%rbp)")
        lines.append(f"{mnemonic}l $0x3,(%rdi)")
    for mnemonic in ("inc", "dec", "neg", "not"):
        lines.extend(f"{mnemonic} %{reg}" for reg in regs64 + regs32)
    for mnemonic in ("shl", "shr", "sar"):
        for reg in regs64:
            lines.append(f"{mnemonic} $0x3,%{reg}")
            lines.append(f"{mnemonic} %cl,%{reg}")
    for reg in regs64:
        lines.append(f"push %{reg}")
        lines.append(f"pop %{reg}")
        lines.append(f"lea 0x8(%{reg}),%rax")
    lines.append("movabs $0x1122334455667788,%rax")
    lines.append("mov table(%rip),%rax")
    lines.append("call *%rax")
    lines.append("jmp *0x8(%rax)")
    return lines


def test_corpus_round_trip_is_fixed_point():
    lines = _corpus()
    assert len(lines) >= 500
    program = parse_program("\n".join(lines), strict=True)
    assert len(program.instructions()) == len(lines)
    once = render_program(program)
    twice = render_program(parse_program(once, strict=True))
    assert once == twice


def test_labels_and_directives_pass_through():
    source = "\t.text\n\t.globl main\nmain:\n# entry\n\tret\n"
    program = parse_program(source)
    assert isinstance(program.lines[0], OpaqueLine) and program.lines[0].kind == "directive"
    assert program.lines[2] == LabelLine("main")
    assert program.lines[3].kind == "comment"
    assert program.symbols == {"main": 2}
    assert render_program(program) == "\t.text\n\t.globl main\nmain:\n# entry\nret\n"


def test_label_and_instruction_on_one_line():
    program = parse_program("loop: dec %ecx\n\tjne loop\n")
    assert program.lines[0] == LabelLine("loop")
    assert program.lines[1].mnemonic == "dec"


def test_duplicate_label_is_syntax_error():
    with pytest.raises(AsmSyntaxError) as exc:
        parse_program("a:\n\tret\na:\n\tret\n")
    assert exc.value.line == 3


def test_bad_scale_reports_line_and_column():
    with pytest.raises(AsmSyntaxError) as exc:
        parse_program("f:\n\tmov (%rax,%rbx,3),%rcx\n")
    assert exc.value.line == 2
    assert exc.value.column > 1


def test_memory_operand_fields():
    instr = parse_instruction("mov -0x10(%rbp,%rsi,4),%eax")
    mem = instr.operands[0]
    assert isinstance(mem, Mem)
    assert (mem.base.name, mem.index.name, mem.scale, mem.disp) == ("rbp", "rsi", 4, -0x10)
    assert str(instr) == "mov -0x10(%rbp,%rsi,4),%eax"


def test_suffix_and_aliases():
    assert parse_instruction("addq $0x1,(%rax)").suffix == "q"
    assert parse_instruction("retq") == Instruction("ret")
    call = parse_instruction("callq system@PLT")
    assert call.target == "system@PLT"


def test_sub_register_width_mismatch_is_syntax_error():
    with pytest.raises(AsmSyntaxError):
        parse_instruction("mov %eax,%rbx", 4)


def test_ambiguous_memory_width_is_syntax_error():
    with pytest.raises(AsmSyntaxError):
        parse_instruction("add $0x1,(%rax)")


def test_comment_is_kept_apart_from_operands():
    instr = parse_instruction("pop %rdi\t# gadget")
    assert instr.comment == "gadget"
    assert instr.canonical() == "pop %rdi"


@pytest.mark.parametrize("token, value", [("0x10", 16), ("-0x8", -8), ("010", 8), ("42", 42), ("0", 0)])
def test_parse_number(token, value):
    assert parse_number(token) == value
