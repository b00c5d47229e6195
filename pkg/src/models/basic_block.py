#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Basic Block Model
A labeled straight-line run of instructions and the way it exits.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional


class TerminatorKind(str, Enum):
    RET = "Ret"
    JMP = "Jmp"
    COND_JMP = "CondJmp"
    CALL = "Call"
    FALLTHROUGH = "FallThrough"


@dataclass(frozen=True)
class Terminator:
    kind: TerminatorKind
    target: Optional[str] = None
    fallthrough: Optional[int] = None
    condition: Optional[str] = None
    indirect: bool = False

    def to_dict(self):
        """Convert terminator to dictionary for JSON output"""
        data = {"kind": self.kind.value}
        if self.target is not None:
            data["target"] = self.target
        if self.fallthrough is not None:
            data["fallthrough"] = self.fallthrough
        if self.condition:
            data["condition"] = self.condition
        if self.indirect:
            data["indirect"] = True
        return data


@dataclass(frozen=True)
class BasicBlock:
    id: int
    label: str
    instructions: tuple
    terminator: Terminator
    labels: tuple = ()
    interior_labels: tuple = ()
    span: tuple = (0, 0)
    diversifiable: bool = True
    selectable: bool = True
    clean_start: int = 0

    def interior_index(self, label: str) -> Optional[int]:
        """instruction index an interior label points at"""
        for name, index in self.interior_labels:
            if name == label:
                return index
        return None

    @property
    def terminator_instruction(self):
        if self.terminator.kind is TerminatorKind.FALLTHROUGH:
            return None
        return self.instructions[-1]

    def to_dict(self):
        """Convert block to dictionary for JSON output"""
        return {
            "id": self.id,
            "label": self.label,
            "len": len(self.instructions),
            "terminator": self.terminator.to_dict(),
            "diversifiable": self.diversifiable,
            "selectable": self.selectable,
        }
