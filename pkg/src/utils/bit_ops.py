#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Bit Operations
Small integer helpers shared by the emulator, test generation and synthesis.
"""

import hashlib

# even parity of each byte value, as PF reports it
PARITY = [bin(value).count("1") % 2 == 0 for value in range(256)]


def mask(width):
    return (1 << width) - 1


def popcount(value):
    return bin(value).count("1")


def derive_seed(seed, *labels):
    """
    Derive a child seed deterministically from a parent seed and labels

    Args:
        seed: parent seed (int)
        labels: anything with a stable str(), e.g. block id and rewrite index

    Returns:
        63-bit non-negative int
    """
    text = ":".join(str(part) for part in (seed, *labels))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
