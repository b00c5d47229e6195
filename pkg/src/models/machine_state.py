#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Machine State Model
Register file, status flags and sparse byte memory for the micro-emulator,
plus the fault and execution result records it produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from models.instruction import FLAGS, GPR64

MASK64 = (1 << 64) - 1

STACK_REGION = (0x7FF00000, 0x7FF10000)
STACK_POINTER = 0x7FF08000


class FaultKind(str, Enum):
    OUT_OF_FOOTPRINT = "OutOfFootprint"
    STACK_OVERFLOW = "StackOverflow"
    DIVIDE_BY_ZERO = "DivideByZero"
    UNSUPPORTED_INSTRUCTION = "UnsupportedInstruction"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    at: int
    detail: str = ""

    def to_dict(self):
        return {"kind": self.kind.value, "at": self.at, "detail": self.detail}


class MachineState:
    __slots__ = ("regs", "flags", "mem", "footprint", "stack", "symbols", "undefined")

    def __init__(self, regs=None, flags=None, mem=None, footprint=(), stack=STACK_REGION,
                 symbols=None, undefined=()):
        """
        Initialize a machine state

        Args:
            regs: 16 register values in encoding order (rsp defaults into the stack)
            flags: dict of the five status flags
            mem: dict address -> byte
            footprint: (start, end) half-open ranges that may be written
            stack: (low, high) stack region
            symbols: global symbol -> address
            undefined: flags whose value the ISA leaves undefined
        """
        if regs is None:
            regs = [0] * 16
            regs[4] = STACK_POINTER
        self.regs = [value & MASK64 for value in regs]
        self.flags = dict(flags) if flags else {flag: False for flag in FLAGS}
        self.mem = dict(mem) if mem else {}
        self.footprint = tuple(sorted(tuple(r) for r in footprint))
        self.stack = tuple(stack)
        self.symbols = symbols if symbols is not None else {}
        self.undefined = set(undefined)

    def copy(self):
        clone = MachineState.__new__(MachineState)
        clone.regs = list(self.regs)
        clone.flags = dict(self.flags)
        clone.mem = dict(self.mem)
        clone.footprint = self.footprint
        clone.stack = self.stack
        clone.symbols = self.symbols
        clone.undefined = set(self.undefined)
        return clone

    def get_reg(self, name):
        return self.regs[GPR64.index(name)]

    def set_reg(self, name, value):
        self.regs[GPR64.index(name)] = value & MASK64

    @property
    def rsp(self):
        return self.regs[4]

    def in_stack(self, address, size=1):
        low, high = self.stack
        return low <= address and address + size <= high

    def writable(self, address, size):
        if self.in_stack(address, size):
            return True
        return any(start <= address and address + size <= end for start, end in self.footprint)

    def read_memory(self, address, size):
        """little-endian read, None when any byte is absent"""
        value = 0
        for offset in range(size):
            byte = self.mem.get((address + offset) & MASK64)
            if byte is None:
                return None
            value |= byte << (8 * offset)
        return value

    def write_memory(self, address, size, value):
        if not self.writable(address, size):
            return False
        for offset in range(size):
            self.mem[(address + offset) & MASK64] = (value >> (8 * offset)) & 0xFF
        return True

    def __eq__(self, other):
        if not isinstance(other, MachineState):
            return NotImplemented
        return self.regs == other.regs and self.flags == other.flags and self.mem == other.mem

    __hash__ = None

    def to_dict(self):
        """Convert state to the test-case JSON layout"""
        runs = []
        for address in sorted(self.mem):
            if runs and runs[-1][0] + len(runs[-1][1]) == address:
                runs[-1][1].append(self.mem[address])
            else:
                runs.append((address, [self.mem[address]]))
        data = {
            "regs": {name: f"0x{value:x}" for name, value in zip(GPR64, self.regs)},
            "flags": {flag.lower(): int(self.flags[flag]) for flag in FLAGS},
            "mem": [{"addr": f"0x{address:x}", "bytes": bytes(values).hex()} for address, values in runs],
            "footprint": [[f"0x{start:x}", f"0x{end:x}"] for start, end in self.footprint],
            "stack": [f"0x{self.stack[0]:x}", f"0x{self.stack[1]:x}"],
        }
        if self.symbols:
            data["symbols"] = {name: f"0x{address:x}" for name, address in sorted(self.symbols.items())}
        return data

    @classmethod
    def from_dict(cls, data):
        """Create state from the test-case JSON layout"""
        regs = [int(data["regs"].get(name, "0x0"), 16) for name in GPR64]
        flags = {flag: bool(int(data["flags"].get(flag.lower(), 0))) for flag in FLAGS}
        mem = {}
        for run in data.get("mem", []):
            start = int(run["addr"], 16)
            for offset, byte in enumerate(bytes.fromhex(run["bytes"])):
                mem[start + offset] = byte
        footprint = [(int(start, 16), int(end, 16)) for start, end in data.get("footprint", [])]
        stack = tuple(int(value, 16) for value in data.get("stack", [hex(v) for v in STACK_REGION]))
        symbols = {name: int(address, 16) for name, address in data.get("symbols", {}).items()}
        return cls(regs, flags, mem, footprint, stack, symbols)


@dataclass
class ExecResult:
    state: Optional[MachineState] = None
    fault: Optional[Fault] = None
    path: tuple = ()

    @property
    def normal(self):
        return self.fault is None

    def to_dict(self):
        data = {"path": [list(step) for step in self.path]}
        if self.fault is not None:
            data["fault"] = self.fault.to_dict()
        else:
            data["state"] = self.state.to_dict()
        return data
