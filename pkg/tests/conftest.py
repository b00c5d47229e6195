#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Shared fixtures: the bundled toy firmware, the taint fixtures and a
factory that cuts blocks out of small assembly snippets.
"""

import os

import pytest

from asm_parser import parse_program
from block_liveness import compute_live_sets
from cfg_builder import build_cfg

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESOURCES = os.path.join(ROOT, "src", "resources")
FIXTURES = os.path.join(ROOT, "tests", "fixtures")

ADD_JE_TEXT = "f:\n\tadd $0x4, %eax\n\ttest %eax, %eax\n\tje 0x112346608\n"
COUNTER_TEXT = "f:\n\tsub $0x1,%rax\n\tadd $0x1,%rdx\n\ttest %rdx,%rdx\n\tje L\nL:\n\tret\n"


def read_text(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


@pytest.fixture
def toy_path():
    return os.path.join(RESOURCES, "toy_firmware.s")


@pytest.fixture
def payload_path():
    return os.path.join(RESOURCES, "toy_payload.json")


@pytest.fixture
def toy_program(toy_path):
    return parse_program(read_text(toy_path))


@pytest.fixture
def toy_cfg(toy_program):
    return build_cfg(toy_program, "main")


@pytest.fixture
def fixture_cfg():
    """CFG of a file under tests/fixtures"""

    def load(name, entry="main"):
        return build_cfg(parse_program(read_text(os.path.join(FIXTURES, name))), entry)

    return load


@pytest.fixture
def make_block():
    """
    Block factory

    Returns:
        callable(text, label=None, entry="f") -> (BasicBlock, LiveSet);
        label picks the block, the entry block by default
    """

    def make(text, label=None, entry="f"):
        cfg = build_cfg(parse_program(text), entry)
        block = cfg.block_for_label(label or entry)
        return block, compute_live_sets(block)

    return make
