#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Live Set Model
Registers, flags and symbolic memory locations a block reads and writes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from models.instruction import FLAGS, GPR64, format_hex

_MEM_TEXT = re.compile(r"\[(?P<body>[^\]]*)\]:(?P<width>\d+)$")
_TERM = re.compile(r"[+-]?[^+-]+")


@dataclass(frozen=True)
class MemLocation:
    """Memory addressed relative to register values at block entry"""

    base: Optional[str] = None
    index: Optional[str] = None
    scale: int = 1
    disp: int = 0
    symbol: Optional[str] = None
    width: int = 8

    def __str__(self):
        parts = []
        if self.symbol:
            parts.append(self.symbol)
        if self.base:
            parts.append(self.base)
        if self.index:
            parts.append(f"{self.index}*{self.scale}")
        text = "+".join(parts)
        if self.disp or not text:
            text += ("+" if text and self.disp >= 0 else "") + format_hex(self.disp)
        return f"[{text}]:{self.width}"

    @classmethod
    def parse(cls, text):
        """inverse of str()"""
        match = _MEM_TEXT.match(text)
        if not match:
            raise ValueError(f"not a memory location: {text}")
        base = index = symbol = None
        scale, disp = 1, 0
        for part in _TERM.findall(match.group("body")):
            token = part.lstrip("+-")
            if token.startswith("0x"):
                disp = -int(token, 16) if part.startswith("-") else int(token, 16)
            elif "*" in token:
                index, factor = token.split("*")
                scale = int(factor)
            elif token in GPR64:
                base = token
            else:
                symbol = token
        return cls(base, index, scale, disp, symbol, int(match.group("width")))


def location_sort_key(location):
    """registers in encoding order, then flags, then memory"""
    if isinstance(location, MemLocation):
        return (2, 0, str(location))
    if location in GPR64:
        return (0, GPR64.index(location), location)
    return (1, FLAGS.index(location), location)


def parse_location(text):
    if text.startswith("["):
        return MemLocation.parse(text)
    return text


@dataclass(frozen=True)
class LiveSet:
    reads: frozenset = frozenset()
    writes: frozenset = frozenset()
    may_alias: bool = False

    def registers(self, which="reads"):
        return [loc for loc in sorted(getattr(self, which), key=location_sort_key) if isinstance(loc, str) and loc in GPR64]

    def flags(self, which="reads"):
        return [loc for loc in sorted(getattr(self, which), key=location_sort_key) if loc in FLAGS]

    def memory(self, which="reads"):
        return [loc for loc in sorted(getattr(self, which), key=location_sort_key) if isinstance(loc, MemLocation)]

    def to_dict(self):
        """Convert live set to dictionary for JSON output"""
        return {
            "reads": [str(loc) for loc in sorted(self.reads, key=location_sort_key)],
            "writes": [str(loc) for loc in sorted(self.writes, key=location_sort_key)],
            "may_alias": self.may_alias,
        }

    @classmethod
    def from_dict(cls, data):
        """Create live set from dictionary"""
        return cls(
            reads=frozenset(parse_location(text) for text in data["reads"]),
            writes=frozenset(parse_location(text) for text in data["writes"]),
            may_alias=data.get("may_alias", False),
        )
