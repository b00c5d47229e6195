#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Diversity Model
Which rewrite each block uses in each firmware variant, and the attacker
payloads variants are checked against.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from errors import SpliceConflict
from models.gadget import GadgetClass, GadgetKind
from models.rewrite import RewriteCandidate
from utils.bit_ops import derive_seed


class ChoiceStrategy(str, Enum):
    MODULO = "modulo"
    RANDOM = "random"


@dataclass
class DiversityPlan:
    """
    Validated rewrites per block plus the rule that picks one per variant

    Attributes:
        entry: entry symbol the block ids were numbered under
        selections: block id -> RewriteCandidate list
        labels: block id -> block label, kept for serialization
        strategy: ChoiceStrategy
        seed: seed of the random strategy and block subsets
        max_blocks: diversify at most this many blocks per variant
    """

    entry: str
    selections: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    strategy: ChoiceStrategy = ChoiceStrategy.MODULO
    seed: int = 0
    max_blocks: Optional[int] = None

    def add(self, block, rewrites):
        if block.id in self.selections:
            raise SpliceConflict(f"block {block.label} is selected twice")
        self.selections[block.id] = list(rewrites)
        self.labels[block.id] = block.label

    def __bool__(self):
        return any(self.selections.values())

    def min_available(self):
        counts = [len(rewrites) for rewrites in self.selections.values() if rewrites]
        return min(counts) if counts else 0

    def blocks_for(self, variant):
        """block ids diversified in variant, ascending"""
        ids = sorted(block_id for block_id, rewrites in self.selections.items() if rewrites)
        if self.max_blocks is None or len(ids) <= self.max_blocks:
            return ids
        rng = random.Random(derive_seed(self.seed, "blocks", variant))
        count = rng.randint(1, self.max_blocks)
        return sorted(rng.sample(ids, count))

    def choices(self, variant):
        """
        Rewrite index per diversified block

        Returns:
            dict block id -> index into selections[block id]
        """
        picked = {}
        for block_id in self.blocks_for(variant):
            available = len(self.selections[block_id])
            if self.strategy is ChoiceStrategy.RANDOM:
                rng = random.Random(derive_seed(self.seed, "choice", variant, block_id))
                picked[block_id] = rng.randrange(available)
            else:
                picked[block_id] = variant % available
        return picked

    def to_dict(self):
        """Convert plan to the plan JSON layout"""
        return {
            "entry": self.entry,
            "strategy": self.strategy.value,
            "seed": self.seed,
            "max_blocks": self.max_blocks,
            "blocks": [
                {"block": block_id, "label": self.labels.get(block_id, ""),
                 "rewrites": [candidate.to_dict() for candidate in rewrites]}
                for block_id, rewrites in sorted(self.selections.items())
            ],
        }

    @classmethod
    def from_dict(cls, data):
        """Create plan from dictionary"""
        plan = cls(
            entry=data["entry"],
            strategy=ChoiceStrategy(data.get("strategy", ChoiceStrategy.MODULO.value)),
            seed=data.get("seed", 0),
            max_blocks=data.get("max_blocks"),
        )
        for item in data.get("blocks", []):
            if item["block"] in plan.selections:
                raise SpliceConflict(f"block {item.get('label') or item['block']} is selected twice")
            plan.selections[item["block"]] = [RewriteCandidate.from_dict(entry) for entry in item["rewrites"]]
            plan.labels[item["block"]] = item.get("label", "")
        return plan


@dataclass(frozen=True)
class PayloadGadget:
    label: str
    gadget_class: GadgetClass

    def to_dict(self):
        data = {"label": self.label, "class": self.gadget_class.kind.value}
        if self.gadget_class.target:
            data["target_reg"] = self.gadget_class.target
        if self.gadget_class.callee:
            data["callee"] = self.gadget_class.callee
        return data

    @classmethod
    def from_dict(cls, data):
        kind = GadgetKind(data["class"])
        if kind is GadgetKind.CHANGE_REGISTER:
            gadget_class = GadgetClass.change_register(data["target_reg"].lstrip("%"))
        elif kind is GadgetKind.CALL:
            gadget_class = GadgetClass.call(data.get("callee"))
        else:
            gadget_class = GadgetClass.change_memory()
        return cls(data["label"], gadget_class)


@dataclass(frozen=True)
class PayloadSpec:
    """An attacker's gadget chain, in execution order"""

    gadgets: tuple = ()
    description: str = ""

    def to_dict(self):
        return {"description": self.description, "gadgets": [gadget.to_dict() for gadget in self.gadgets]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(PayloadGadget.from_dict(item) for item in data.get("gadgets", [])),
                   data.get("description", ""))


@dataclass(frozen=True)
class ResolvedGadget:
    """A payload gadget pinned to its address in the original program"""

    index: int
    label: str
    gadget_class: GadgetClass
    block_label: str
    offset: int
    sequence: tuple
    expected: object


@dataclass
class GadgetVerdict:
    index: int
    label: str
    holds: bool
    reason: str = ""

    def to_dict(self):
        data = {"index": self.index, "label": self.label, "holds": self.holds}
        if self.reason:
            data["reason"] = self.reason
        return data


@dataclass
class PayloadVerdict:
    feasible: bool
    first_broken: Optional[int] = None
    verdicts: list = field(default_factory=list)

    def to_dict(self):
        return {
            "feasible": self.feasible,
            "first_broken": self.first_broken,
            "gadgets": [verdict.to_dict() for verdict in self.verdicts],
        }
