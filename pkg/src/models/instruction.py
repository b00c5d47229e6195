#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Instruction Model
Typed representation of the supported AT&T x86-64 subset: registers,
operands, instructions and whole programs with their pass-through lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

GPR64 = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)

_REGISTER_NAMES = {
    64: GPR64,
    32: ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
         "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"),
    16: ("ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
         "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w"),
    8: ("al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
        "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b"),
}

FLAGS = ("CF", "PF", "ZF", "SF", "OF")

CONDITION_CODES = (
    "je", "jne", "jl", "jle", "jg", "jge", "jb", "jbe", "ja", "jae", "js", "jns",
)

# flags each conditional jump reads
CONDITION_FLAGS = {
    "je": ("ZF",), "jne": ("ZF",),
    "jl": ("SF", "OF"), "jge": ("SF", "OF"),
    "jle": ("ZF", "SF", "OF"), "jg": ("ZF", "SF", "OF"),
    "jb": ("CF",), "jae": ("CF",),
    "jbe": ("CF", "ZF"), "ja": ("CF", "ZF"),
    "js": ("SF",), "jns": ("SF",),
}

BINARY_ALU = ("add", "sub", "xor", "and", "or")
UNARY_ALU = ("inc", "dec", "neg", "not")
SHIFTS = ("shl", "shr", "sar")
CONTROL = ("call", "ret", "jmp") + CONDITION_CODES

SUFFIX_WIDTH = {"b": 8, "w": 16, "l": 32, "q": 64}
WIDTH_SUFFIX = {width: suffix for suffix, width in SUFFIX_WIDTH.items()}

# Operand shapes per mnemonic in AT&T order: i = immediate, r = register,
# m = memory, l = label. Shifts by register always count with %cl.
_ALU_SHAPES = ("ir", "im", "rr", "rm", "mr")
SIGNATURES = {
    "mov": _ALU_SHAPES,
    "movabs": ("ir",),
    "lea": ("mr",),
    "add": _ALU_SHAPES,
    "sub": _ALU_SHAPES,
    "xor": _ALU_SHAPES,
    "and": _ALU_SHAPES,
    "or": _ALU_SHAPES,
    "cmp": _ALU_SHAPES,
    "test": _ALU_SHAPES,
    "inc": ("r", "m"),
    "dec": ("r", "m"),
    "neg": ("r", "m"),
    "not": ("r", "m"),
    "shl": ("ir", "im", "rr", "rm", "r", "m"),
    "shr": ("ir", "im", "rr", "rm", "r", "m"),
    "sar": ("ir", "im", "rr", "rm", "r", "m"),
    "push": ("r", "i", "m"),
    "pop": ("r", "m"),
    "call": ("l", "r", "m"),
    "jmp": ("l", "r", "m"),
    "ret": ("",),
    "nop": ("",),
}
for _cc in CONDITION_CODES:
    SIGNATURES[_cc] = ("l",)

# mnemonics whose operand size defaults to 64 bits without a suffix
_DEFAULT_64 = ("push", "pop", "call", "jmp", "ret", "nop") + CONDITION_CODES


def format_hex(value: int) -> str:
    """render an integer the way the canonical printer does"""
    return f"-0x{-value:x}" if value < 0 else f"0x{value:x}"


def signed(value: int, width: int) -> int:
    """reinterpret an unsigned width-bit value as signed"""
    value &= (1 << width) - 1
    return value - (1 << width) if value >> (width - 1) else value


def fits_signed(value: int, width: int) -> bool:
    return -(1 << (width - 1)) <= value < (1 << (width - 1))


@dataclass(frozen=True)
class Register:
    name: str
    width: int
    number: int

    @property
    def parent(self) -> str:
        """canonical 64-bit register name"""
        return GPR64[self.number]

    @property
    def needs_rex(self) -> bool:
        return self.number >= 8 or self.name in ("spl", "bpl", "sil", "dil")

    def __str__(self):
        return "%" + self.name


REGISTERS = {
    name: Register(name, width, number)
    for width, names in _REGISTER_NAMES.items()
    for number, name in enumerate(names)
}


def register(parent: str, width: int = 64) -> Register:
    """the width-bit view of a canonical 64-bit register"""
    return REGISTERS[_REGISTER_NAMES[width][GPR64.index(parent)]]


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return "$" + format_hex(self.value)


@dataclass(frozen=True)
class Reg:
    register: Register

    def __str__(self):
        return str(self.register)


@dataclass(frozen=True)
class Mem:
    base: Optional[Register] = None
    index: Optional[Register] = None
    scale: int = 1
    disp: int = 0
    symbol: Optional[str] = None
    rip: bool = False

    def __post_init__(self):
        for reg in (self.base, self.index):
            if reg is not None and reg.width != 64:
                raise ValueError(f"address register {reg} must be 64-bit")
        if self.index is not None and self.index.parent == "rsp":
            raise ValueError("%rsp cannot be an index register")
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"invalid scale {self.scale}")
        if self.index is None and self.scale != 1:
            raise ValueError("scale given without an index register")
        if self.rip and (self.base is not None or self.index is not None):
            raise ValueError("rip-relative operand cannot use base or index")
        if not fits_signed(self.disp, 32):
            raise ValueError(f"displacement {format_hex(self.disp)} out of range")

    def registers(self) -> tuple:
        return tuple(reg for reg in (self.base, self.index) if reg is not None)

    def __str__(self):
        text = ""
        if self.symbol:
            text = self.symbol
            if self.disp:
                text += ("+" if self.disp > 0 else "") + format_hex(self.disp)
        elif self.disp or (self.base is None and self.index is None and not self.rip):
            text = format_hex(self.disp)
        if self.rip:
            return text + "(%rip)"
        if self.base is None and self.index is None:
            return text
        inner = str(self.base) if self.base else ""
        if self.index is not None:
            inner += f",{self.index},{self.scale}"
        return f"{text}({inner})"


@dataclass(frozen=True)
class Label:
    symbol: str

    def __str__(self):
        return self.symbol


Operand = Union[Imm, Reg, Mem, Label]

_KIND = {Imm: "i", Reg: "r", Mem: "m", Label: "l"}


def operand_kind(op: Operand) -> str:
    return _KIND[type(op)]


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple = ()
    suffix: str = ""
    source: Optional[str] = field(default=None, compare=False)
    comment: Optional[str] = field(default=None, compare=False)

    @property
    def shape(self) -> str:
        return "".join(operand_kind(op) for op in self.operands)

    @property
    def width(self) -> Optional[int]:
        """operand size in bits, None when it cannot be determined"""
        if self.suffix:
            return SUFFIX_WIDTH[self.suffix]
        regs = [op.register for op in self.operands if isinstance(op, Reg)]
        if self.mnemonic in SHIFTS and len(self.operands) == 2 and isinstance(self.operands[0], Reg):
            regs = regs[1:]
        if self.mnemonic in ("push", "pop") and regs:
            return regs[-1].width
        if self.mnemonic in _DEFAULT_64:
            return 64
        if regs:
            return regs[-1].width
        return None

    @property
    def is_control(self) -> bool:
        return self.mnemonic in CONTROL

    @property
    def is_conditional(self) -> bool:
        return self.mnemonic in CONDITION_CODES

    @property
    def is_indirect(self) -> bool:
        return self.mnemonic in ("call", "jmp") and not isinstance(self.operands[0], Label)

    @property
    def target(self) -> Optional[str]:
        if self.operands and isinstance(self.operands[0], Label):
            return self.operands[0].symbol
        return None

    def canonical(self) -> str:
        """printed form without comment, used for distinctness checks"""
        name = self.mnemonic + self.suffix
        if not self.operands:
            return name
        parts = [str(op) for op in self.operands]
        if self.is_control and self.is_indirect:
            parts[0] = "*" + parts[0]
        return f"{name} {','.join(parts)}"

    def __str__(self):
        text = self.canonical()
        if self.comment:
            text += "\t# " + self.comment
        return text


def validate_instruction(instr: Instruction) -> None:
    """
    Check an instruction against the signature table and operand-size rules

    Raises:
        KeyError: unknown mnemonic or operand shape outside the signature
        ValueError: ill-formed operands (size mismatch, immediate range, ...)
    """
    shapes = SIGNATURES[instr.mnemonic]
    if instr.shape not in shapes:
        raise KeyError(f"{instr.mnemonic} does not take operands '{instr.shape}'")
    if instr.mnemonic in CONDITION_CODES and instr.suffix:
        raise KeyError(f"{instr.mnemonic} takes no size suffix")

    m = instr.mnemonic
    regs = [op.register for op in instr.operands if isinstance(op, Reg)]
    width = instr.width
    if width is None:
        raise ValueError("operand size is ambiguous; add a size suffix")

    if m in SHIFTS and instr.shape in ("rr", "rm"):
        if instr.operands[0].register.name != "cl":
            raise ValueError("shift count register must be %cl")
        regs = regs[1:]
    for reg in regs:
        if m in ("call", "jmp") and reg.width != 64:
            raise ValueError("indirect target must be a 64-bit register")
        if m not in ("call", "jmp") and reg.width != width:
            raise ValueError(f"{reg} does not match the {width}-bit operand size")

    if m == "movabs" and width != 64:
        raise ValueError("movabs needs a 64-bit destination")
    if m == "lea" and width == 8:
        raise ValueError("lea destination cannot be 8-bit")
    if m in ("push", "pop") and width not in (16, 64):
        raise ValueError(f"{m} operand must be 16 or 64 bits")

    for op in instr.operands:
        if isinstance(op, Imm):
            _check_immediate(instr, op.value, width)


def _check_immediate(instr: Instruction, value: int, width: int) -> None:
    m = instr.mnemonic
    if m in SHIFTS:
        ok = 0 <= value <= 0xFF
    elif m == "movabs" or (m == "mov" and instr.shape == "ir" and width == 64):
        ok = fits_signed(value, 64)
    elif width == 64 or m == "push":
        ok = fits_signed(value, 32)
    else:
        ok = -(1 << (width - 1)) <= value < (1 << width)
    if not ok:
        raise ValueError(f"immediate {format_hex(value)} out of range for {m}")


@dataclass(frozen=True)
class LabelLine:
    name: str

    def __str__(self):
        return f"{self.name}:"


@dataclass(frozen=True)
class OpaqueLine:
    """Line carried through verbatim: directive, comment, blank or unsupported instruction"""

    text: str
    kind: str

    def __str__(self):
        return self.text


Line = Union[LabelLine, OpaqueLine, Instruction]


@dataclass(frozen=True)
class Program:
    lines: tuple = ()
    symbols: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        symbols = {}
        for index, line in enumerate(self.lines):
            if isinstance(line, LabelLine):
                if line.name in symbols:
                    raise ValueError(f"duplicate label '{line.name}'")
                symbols[line.name] = index
        object.__setattr__(self, "symbols", symbols)

    def instructions(self) -> list:
        return [line for line in self.lines if isinstance(line, Instruction)]

    def is_external(self, symbol: str) -> bool:
        return symbol not in self.symbols

    def labeled_runs(self) -> list:
        """(label, instructions) pairs in source order; the first label may be None"""
        runs = [(None, [])]
        for line in self.lines:
            if isinstance(line, LabelLine):
                runs.append((line.name, []))
            elif isinstance(line, Instruction):
                runs[-1][1].append(line)
        return [run for run in runs if run[0] is not None or run[1]]
