#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Assembly Parser Module
Reads AT&T-syntax reassemblable assembly into the instruction model and
prints it back in canonical form.
"""

import logging
import re

from errors import AsmSyntaxError, UnsupportedInstruction
from models.instruction import (
    CONDITION_CODES, REGISTERS, SIGNATURES, SUFFIX_WIDTH,
    Imm, Instruction, Label, LabelLine, Mem, OpaqueLine, Program, Reg,
    validate_instruction,
)

logger = logging.getLogger(__name__)

_LABEL = re.compile(r"\s*([A-Za-z_.$][\w.$@]*|\d+)\s*:")
_SYMBOL = re.compile(r"[A-Za-z_.$][\w.$@]*$")
_SYMBOL_OFFSET = re.compile(r"([A-Za-z_.$][\w.$@]*)\s*([+-].+)?$")
_NUMBER = re.compile(r"-?(0[xX][0-9a-fA-F]+|0[0-7]*|[1-9][0-9]*)$")

_PREFIXES = ("rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd", "data16")
_CONTROL_ALIASES = {"retq": "ret", "callq": "call", "jmpq": "jmp"}


class _Unsupported(Exception):
    """operand or mnemonic outside the subset"""


def parse_number(token):
    """parse a gas integer literal (decimal, hex, octal, optional minus)"""
    token = token.strip()
    if not _NUMBER.match(token):
        raise ValueError(f"invalid number '{token}'")
    negative = token.startswith("-")
    digits = token[1:] if negative else token
    if digits.lower().startswith("0x"):
        value = int(digits, 16)
    elif len(digits) > 1 and digits.startswith("0"):
        value = int(digits, 8)
    else:
        value = int(digits, 10)
    return -value if negative else value


def _split_operands(text):
    """split on commas that are not inside parentheses"""
    parts, depth, current = [], 0, []
    for char in text:
        if char == "(":
            depth += 1
        elif char == ")":
            depth -= 1
        if char == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(char)
    parts.append("".join(current))
    return [part.strip() for part in parts]


def _strip_comment(text):
    """drop a trailing '#' comment that is not inside a string literal"""
    quoted = False
    for position, char in enumerate(text):
        if char == '"':
            quoted = not quoted
        elif char == "#" and not quoted:
            return text[:position], text[position + 1:].strip()
    return text, None


def _resolve_mnemonic(token):
    """map a written mnemonic to (base mnemonic, explicit suffix)"""
    token = token.lower()
    if token in _CONTROL_ALIASES:
        return _CONTROL_ALIASES[token], ""
    if token in SIGNATURES:
        return token, ""
    base, suffix = token[:-1], token[-1:]
    if suffix in SUFFIX_WIDTH and base in SIGNATURES and base not in CONDITION_CODES:
        return base, suffix
    raise _Unsupported(f"unknown mnemonic '{token}'")


def _register(token):
    name = token[1:].lower()
    if name not in REGISTERS:
        raise _Unsupported(f"unsupported register '{token}'")
    return REGISTERS[name]


def _address_register(token):
    reg = _register(token)
    if reg.width != 64:
        raise _Unsupported(f"32-bit addressing with '{token}' is not supported")
    return reg


def _normalize_disp(value):
    if 0x80000000 <= value <= 0xFFFFFFFF:
        value -= 1 << 32
    return value


def _parse_symbolic(text):
    """'sym', 'sym+0x8', '0x10' -> (symbol, displacement)"""
    text = text.strip()
    if not text:
        return None, 0
    if _NUMBER.match(text):
        return None, _normalize_disp(parse_number(text))
    match = _SYMBOL_OFFSET.match(text)
    if not match:
        raise ValueError(f"invalid displacement '{text}'")
    offset = match.group(2)
    disp = parse_number(offset.replace("+", "", 1)) if offset else 0
    return match.group(1), disp


def _parse_memory(text):
    if text.count("(") != 1 or not text.endswith(")"):
        raise ValueError(f"malformed memory operand '{text}'")
    prefix, inner = text[:-1].split("(")
    if ":" in prefix:
        raise _Unsupported("segment overrides are not supported")
    symbol, disp = _parse_symbolic(prefix)
    fields = [field.strip() for field in inner.split(",")]
    if len(fields) > 3:
        raise ValueError(f"malformed memory operand '{text}'")
    base_text = fields[0]
    index_text = fields[1] if len(fields) > 1 else ""
    scale_text = fields[2] if len(fields) > 2 else ""
    if base_text.lower() == "%rip":
        if index_text:
            raise ValueError("rip-relative operand cannot be indexed")
        return Mem(disp=disp, symbol=symbol, rip=True)
    for token in (base_text, index_text):
        if token and not token.startswith("%"):
            raise ValueError(f"malformed memory operand '{text}'")
    base = _address_register(base_text) if base_text else None
    index = _address_register(index_text) if index_text else None
    scale = parse_number(scale_text) if scale_text else 1
    return Mem(base=base, index=index, scale=scale, disp=disp, symbol=symbol)


def _parse_operand(text, control):
    """
    Parse one AT&T operand

    Args:
        text: operand text without surrounding whitespace
        control: True for call/jmp/jcc, where bare symbols are branch targets

    Returns:
        (operand, indirect) tuple
    """
    if not text:
        raise ValueError("empty operand")
    indirect = text.startswith("*")
    if indirect:
        if not control:
            raise ValueError("'*' is only valid on call and jmp targets")
        text = text[1:].strip()
    if text.startswith("$"):
        body = text[1:].strip()
        if not _NUMBER.match(body):
            if _SYMBOL_OFFSET.match(body):
                raise _Unsupported("symbolic immediates are not supported")
            raise ValueError(f"invalid immediate '{text}'")
        value = parse_number(body)
        if 1 << 63 <= value < 1 << 64:
            value -= 1 << 64
        return Imm(value), indirect
    if text.startswith("%"):
        if ":" in text:
            raise _Unsupported("segment registers are not supported")
        return Reg(_register(text)), indirect
    if "(" in text or ")" in text:
        return _parse_memory(text), indirect
    if ":" in text:
        raise _Unsupported("segment overrides are not supported")
    if control and not indirect:
        if _NUMBER.match(text) or _SYMBOL.match(text):
            return Label(text), False
        raise ValueError(f"invalid branch target '{text}'")
    symbol, disp = _parse_symbolic(text)
    return Mem(disp=disp, symbol=symbol), indirect


def parse_instruction(text, line_no=0):
    """
    Parse a single instruction

    Args:
        text: instruction text, optionally with a trailing comment
        line_no: source line used in error reports

    Returns:
        Instruction

    Raises:
        AsmSyntaxError: malformed operands
        UnsupportedInstruction: mnemonic or operand outside the subset
    """
    body, comment = _strip_comment(text)
    stripped = body.strip()
    column = len(body) - len(body.lstrip()) + 1
    parts = stripped.split(None, 1)
    head = parts[0]
    rest = parts[1].strip() if len(parts) > 1 else ""
    try:
        if head.lower() in _PREFIXES:
            raise _Unsupported(f"prefix '{head}' is not supported")
        mnemonic, suffix = _resolve_mnemonic(head)
        control = mnemonic in ("call", "jmp") or mnemonic in CONDITION_CODES
        operands = []
        if rest:
            offset = stripped.find(rest)
            for part in _split_operands(rest):
                try:
                    operand, _ = _parse_operand(part, control)
                except ValueError as exc:
                    position = stripped.find(part, offset) if part else offset
                    raise AsmSyntaxError(line_no, column + max(position, 0), str(exc)) from None
                operands.append(operand)
        instr = Instruction(mnemonic, tuple(operands), suffix, source=text.rstrip("\n"), comment=comment)
        try:
            validate_instruction(instr)
        except KeyError as exc:
            raise _Unsupported(str(exc).strip("'\"")) from None
        except ValueError as exc:
            raise AsmSyntaxError(line_no, column, str(exc)) from None
    except _Unsupported as exc:
        logger.debug("line %d: %s", line_no, exc)
        raise UnsupportedInstruction(line_no, stripped) from None
    return instr


def _opaque_kind(stripped):
    if not stripped:
        return "blank"
    if stripped.startswith("#"):
        return "comment"
    if stripped.startswith("."):
        return "directive"
    return "instruction"


def parse_program(text, strict=False):
    """
    Parse assembly source into a Program

    Args:
        text: assembly source
        strict: raise UnsupportedInstruction instead of keeping opaque lines

    Returns:
        Program

    Raises:
        AsmSyntaxError: malformed operands or duplicate labels
        UnsupportedInstruction: only in strict mode
    """
    lines = []
    seen = set()
    opaque_instructions = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        rest = raw
        labeled = False
        while True:
            match = _LABEL.match(rest)
            if not match or rest[match.end():].startswith(":"):
                break
            name = match.group(1)
            if name in seen:
                raise AsmSyntaxError(line_no, raw.index(name) + 1, f"duplicate label '{name}'")
            seen.add(name)
            lines.append(LabelLine(name))
            rest = rest[match.end():]
            labeled = True
        if labeled:
            if not rest.strip():
                continue
            rest = rest.strip()
        stripped = rest.strip()
        kind = _opaque_kind(stripped)
        if kind != "instruction":
            lines.append(OpaqueLine(rest, kind))
            continue
        try:
            lines.append(parse_instruction(rest, line_no))
        except UnsupportedInstruction:
            if strict:
                raise
            opaque_instructions += 1
            lines.append(OpaqueLine(rest, "instruction"))
    if opaque_instructions:
        logger.info("kept %d unsupported instructions as opaque lines", opaque_instructions)
    return Program(tuple(lines))


def render_program(program):
    """
    Render a Program as canonical assembly text

    Instructions print as 'mnemonic op1,op2' with hex immediates, labels as
    'name:', opaque lines verbatim. The result ends with a newline unless
    the program is empty.
    """
    if not program.lines:
        return ""
    return "\n".join(str(line) for line in program.lines) + "\n"
