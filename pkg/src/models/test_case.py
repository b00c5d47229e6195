#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Test Case Model
An input machine state paired with the result the original block produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from models.machine_state import ExecResult, MachineState


class CaseOrigin(str, Enum):
    RANDOM = "Random"
    FUZZ = "Fuzz"
    MANUAL = "Manual"


@dataclass
class TestCase:
    __test__ = False

    input: MachineState
    expected: ExecResult
    origin: CaseOrigin = CaseOrigin.RANDOM
    bucket: int = None

    @classmethod
    def for_block(cls, instructions, state, origin=CaseOrigin.MANUAL, bucket=None):
        """
        Build a case whose expectation comes from running the original

        Args:
            instructions: original block instructions
            state: input MachineState
        """
        from micro_emulator import run_block

        return cls(state, run_block(state, instructions), origin, bucket)

    def to_dict(self):
        """Convert case to the suite JSON layout"""
        data = {"input": self.input.to_dict(), "expected": self.expected.to_dict(), "origin": self.origin.value}
        if self.bucket is not None:
            data["bucket"] = self.bucket
        return data

    @classmethod
    def from_dict(cls, data, instructions):
        """
        Load a case; the expectation is recomputed from the original block
        rather than trusted from disk
        """
        return cls.for_block(
            instructions,
            MachineState.from_dict(data["input"]),
            CaseOrigin(data.get("origin", CaseOrigin.MANUAL.value)),
            data.get("bucket"),
        )
