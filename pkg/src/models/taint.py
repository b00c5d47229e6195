#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Taint Model
Definitions, observation points and per-point results of the
reaching-definitions taint analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field


def subject_name(subject):
    """rdi, stack:1:-0x40, global:buf"""
    if isinstance(subject, str):
        return subject
    if subject[0] == "stack":
        _, frame, offset = subject
        sign = "-" if offset < 0 else ""
        return f"stack:{frame}:{sign}0x{abs(offset):x}"
    return f"global:{subject[1]}"


@dataclass(frozen=True)
class Definition:
    site: tuple
    subject: object
    tainted: bool

    def to_dict(self):
        return {"site": list(self.site), "subject": subject_name(self.subject), "tainted": self.tainted}


@dataclass(frozen=True)
class ObservationPoint:
    call_site: tuple
    callee: str
    registers: tuple
    block_label: str = ""

    def to_dict(self):
        return {
            "call_site": list(self.call_site),
            "callee": self.callee,
            "registers": list(self.registers),
            "block_label": self.block_label,
        }


@dataclass
class PointResult:
    point: ObservationPoint
    tainted_args: list = field(default_factory=list)
    selected: bool = False
    warnings: list = field(default_factory=list)
    reaching: list = field(default_factory=list)

    @property
    def block_id(self):
        return self.point.call_site[0]

    def to_dict(self):
        """Convert result to dictionary for JSON output"""
        return {
            "call_site": list(self.point.call_site),
            "block_label": self.point.block_label,
            "callee": self.point.callee,
            "tainted_args": list(self.tainted_args),
            "selected": self.selected,
            "warnings": list(self.warnings),
            "reaching": [definition.to_dict() for definition in self.reaching],
        }

    @classmethod
    def from_dict(cls, data):
        point = ObservationPoint(tuple(data["call_site"]), data["callee"], (), data.get("block_label", ""))
        return cls(point, list(data["tainted_args"]), data.get("selected", False), list(data.get("warnings", [])))
