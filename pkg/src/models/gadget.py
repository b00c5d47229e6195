#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Gadget Model
Gadget classes and located gadget records found by the scanners.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class GadgetKind(str, Enum):
    CHANGE_REGISTER = "ChangeRegister"
    CHANGE_MEMORY = "ChangeMemory"
    CALL = "Call"


@dataclass(frozen=True, order=True)
class GadgetClass:
    kind: GadgetKind
    target: Optional[str] = None
    callee: Optional[str] = None

    @classmethod
    def change_register(cls, target):
        return cls(GadgetKind.CHANGE_REGISTER, target=target)

    @classmethod
    def change_memory(cls):
        return cls(GadgetKind.CHANGE_MEMORY)

    @classmethod
    def call(cls, callee):
        return cls(GadgetKind.CALL, callee=callee)

    def key(self):
        """sort key and display tag, e.g. ChangeRegister{rdi}"""
        if self.kind is GadgetKind.CHANGE_REGISTER:
            return f"{self.kind.value}{{{self.target}}}"
        if self.kind is GadgetKind.CALL:
            return f"{self.kind.value}{{{self.callee}}}"
        return self.kind.value

    def __str__(self):
        return self.key()

    def to_dict(self):
        data = {"kind": self.kind.value}
        if self.target:
            data["target"] = self.target
        if self.callee:
            data["callee"] = self.callee
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(GadgetKind(data["kind"]), data.get("target"), data.get("callee"))


@dataclass(frozen=True)
class GadgetRecord:
    """A gadget located at (block id, instruction index)"""

    block_id: int
    index: int
    gadget_class: GadgetClass
    sequence: tuple
    source_scanner: str = "suffix"
    block_label: str = ""
    offset: int = 0
    location: tuple = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "location", (self.block_id, self.index))

    def to_dict(self):
        """Convert record to dictionary for JSON output"""
        return {
            "block": self.block_id,
            "block_label": self.block_label,
            "index": self.index,
            "offset": self.offset,
            "class": self.gadget_class.to_dict(),
            "sequence": [instr.canonical() for instr in self.sequence],
            "source": self.source_scanner,
        }

    @classmethod
    def from_dict(cls, data):
        """Create record from dictionary"""
        from asm_parser import parse_instruction

        return cls(
            block_id=data["block"],
            index=data["index"],
            gadget_class=GadgetClass.from_dict(data["class"]),
            sequence=tuple(parse_instruction(text) for text in data["sequence"]),
            source_scanner=data.get("source", "suffix"),
            block_label=data.get("block_label", ""),
            offset=data.get("offset", 0),
        )
