#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Errors Module
Exception and warning types shared by every BlockDiv stage.
"""


class BlockDivError(Exception):
    """Base class of every fatal toolkit error"""


class AsmSyntaxError(BlockDivError):
    def __init__(self, line, column, reason):
        """
        Malformed assembly input

        Args:
            line: 1-based source line
            column: 1-based column of the offending token
            reason: human readable description
        """
        self.line = line
        self.column = column
        self.reason = reason
        super().__init__(f"line {line}, column {column}: {reason}")


class UnsupportedInstruction(BlockDivError):
    def __init__(self, line, text=""):
        self.line = line
        self.text = text
        detail = f": {text.strip()}" if text else ""
        super().__init__(f"unsupported instruction at line {line}{detail}")


class UnknownEntry(BlockDivError):
    def __init__(self, entry):
        self.entry = entry
        super().__init__(f"entry symbol '{entry}' is not defined in the program")


class NotFound(BlockDivError):
    """Raised when a label or address does not resolve to a block"""


class NonDiversifiable(BlockDivError):
    """Raised for blocks that cannot become synthesis units"""


class InvalidCount(BlockDivError):
    def __init__(self, name, value):
        self.name = name
        self.value = value
        super().__init__(f"{name} must be at least 1 (got {value})")


class SynthesisNotFound(BlockDivError):
    """No validated rewrite was found within the search budget"""


class PartialResult(BlockDivError):
    def __init__(self, rewrites, requested):
        """
        Fewer distinct rewrites than requested

        Args:
            rewrites: the validated rewrites that were found
            requested: the number that was asked for
        """
        self.rewrites = list(rewrites)
        self.requested = requested
        super().__init__(f"found {len(self.rewrites)} of {requested} requested rewrites")


class SpliceConflict(BlockDivError):
    """Two selections cover overlapping source lines"""


class SizeRegression(BlockDivError):
    """An emitted variant is larger than the original program"""


class UnresolvableGadget(BlockDivError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"gadget label '{label}' does not resolve in the program")


class StageError(BlockDivError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class CoverageIncomplete(UserWarning):
    """The fuzzer did not reach every abort site of a harnessed block"""


class MultiSlotUnsupported(UserWarning):
    """More live-in locations than fuzz input registers"""
