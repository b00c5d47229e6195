#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Rewrite Model
Synthesis units, search configuration, cost records and rewrite candidates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from errors import InvalidCount
from models.live_set import LiveSet

MOVES = ("opcode", "operand", "swap", "insert", "delete")


@dataclass
class SynthesisConfig:
    n_rewrites: int = 3
    iterations: int = 1_000_000
    restarts: int = 8
    beta: float = 1.0
    move_weights: dict = field(default_factory=lambda: {move: 1.0 for move in MOVES})
    flag_weight: int = 32
    fault_penalty: int = 4096
    size_penalty_weight: int = 8
    gadget_weight: int = 64
    patience: int = 20000
    holdout_factor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_rewrites < 1:
            raise InvalidCount("n_rewrites", self.n_rewrites)
        if self.iterations < 1:
            raise InvalidCount("iterations", self.iterations)
        if self.restarts < 1:
            raise InvalidCount("restarts", self.restarts)
        unknown = set(self.move_weights) - set(MOVES)
        if unknown:
            raise ValueError(f"unknown move(s): {', '.join(sorted(unknown))}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


@dataclass(frozen=True)
class GadgetProbe:
    """a gadget the search tries to break, by byte offset in the block"""

    offset: int
    gadget_class: object
    expected: object


@dataclass(frozen=True)
class SynthesisUnit:
    block_id: int
    label: str
    body: tuple
    original: tuple
    original_terminator: Optional[object]
    check_flags: bool
    live: LiveSet
    size_budget: int
    tail_length: int
    probes: tuple = ()

    def restore(self, body):
        """swap the trailing ret back for the original exit"""
        if self.original_terminator is None:
            return tuple(body[:-1])
        return tuple(body[:-1]) + (self.original_terminator,)


@dataclass(frozen=True)
class CostRecord:
    correctness: int = 0
    size_excess: int = 0
    gadgets: int = 0
    total: int = 0
    faults: int = 0

    @property
    def correct(self):
        return self.correctness == 0 and self.size_excess == 0

    def to_dict(self):
        return asdict(self)


@dataclass
class RewriteCandidate:
    body: tuple
    cost: CostRecord
    validated: bool = False
    restored: tuple = ()

    def canonical(self):
        return canonical_form(self.body)

    def to_dict(self):
        """Convert candidate to the per-block result JSON entry"""
        from encoder import encoded_length

        return {
            "asm": [instr.canonical() for instr in self.restored],
            "length": encoded_length(self.restored),
            "cost_zero": self.cost.correct,
            "gadgets_surviving": self.cost.gadgets,
            "validated": self.validated,
        }

    @classmethod
    def from_dict(cls, data):
        """Rebuild a candidate from its restored assembly"""
        from asm_parser import parse_instruction
        from models.instruction import Instruction

        restored = tuple(parse_instruction(text) for text in data["asm"])
        tail = restored[:-1] if restored and restored[-1].is_control else restored
        cost = CostRecord(gadgets=data.get("gadgets_surviving", 0))
        return cls(tail + (Instruction("ret"),), cost, data.get("validated", False), restored)


def canonical_form(body):
    return "; ".join(instr.canonical() for instr in body)
