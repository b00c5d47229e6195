#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import pytest

from asm_parser import parse_program
from cfg_builder import block_at, build_cfg
from errors import NotFound, UnknownEntry
from models.basic_block import TerminatorKind


def test_add_je_block_with_trailing_label():
    cfg = build_cfg(parse_program("f:\n add $0x4, %eax\n test %eax, %eax\n je L1\nL1:\n ret\n"), "f")
    block = cfg.block(cfg.entry)
    assert len(block.instructions) == 3
    assert block.terminator.kind is TerminatorKind.COND_JMP
    assert block.terminator.condition == "je"
    assert cfg.graph.out_degree(block.id) == 2
    assert cfg.edges() == [(0, 1, "fallthrough"), (0, 1, "taken")]


def test_single_ret():
    cfg = build_cfg(parse_program("main:\n\tret\n"), "main")
    assert len(cfg.blocks) == 1
    assert cfg.edges() == []
    assert cfg.block(0).terminator.kind is TerminatorKind.RET


def test_jump_into_straight_line_code_splits_it():
    source = "main:\n\tmov %rdi,%rax\nmid:\n\tadd $0x1,%rax\n\tsub $0x2,%rax\n\tret\ntail:\n\tjmp mid\n"
    cfg = build_cfg(parse_program(source), "main")
    assert [block.label for block in cfg.blocks] == ["main", "mid", "tail"]
    assert cfg.block(0).terminator.kind is TerminatorKind.FALLTHROUGH
    assert cfg.edges() == [(0, 1, "fallthrough"), (2, 1, "jump")]


def test_unknown_entry():
    with pytest.raises(UnknownEntry):
        build_cfg(parse_program("main:\n\tret\n"), "start")


def test_dangling_target_is_external_not_fatal():
    cfg = build_cfg(parse_program("main:\n\tjmp nowhere\n"), "main")
    assert cfg.edges() == []
    assert cfg.external_edges == ((0, "nowhere", "jump"),)


def test_toy_firmware_blocks(toy_cfg):
    labels = [block.label for block in toy_cfg.blocks]
    assert labels == [
        "main", ".B1", ".B2", ".B3", ".Ldone", "parse_request", ".B6", ".Lreject",
        "run_command", ".B9", "checksum", "copy_len", "scale",
    ]
    kinds = [block.terminator.kind for block in toy_cfg.blocks]
    assert kinds.count(TerminatorKind.CALL) == 4
    assert kinds.count(TerminatorKind.COND_JMP) == 2
    assert toy_cfg.block(8).interior_labels == (("g_call_system", 2),)
    assert toy_cfg.block(10).interior_labels == (("g_pop_rdi", 2),)
    assert all(block.diversifiable for block in toy_cfg.blocks)


def test_toy_firmware_edges(toy_cfg):
    edges = toy_cfg.edges()
    assert (1, 5, "call") in edges
    assert (2, 4, "taken") in edges
    assert (2, 3, "fallthrough") in edges
    assert (3, 8, "call") in edges
    assert (0, "strcpy", "call") in toy_cfg.external_edges
    assert toy_cfg.function_blocks("main") == [0, 1, 2, 3, 4]
    assert toy_cfg.function_blocks("parse_request") == [5, 6, 7]


def test_block_at_exact(toy_cfg):
    block, how = block_at(toy_cfg, "checksum")
    assert (block.id, how) == (10, "exact")


def test_block_at_interior(toy_cfg):
    block, how = block_at(toy_cfg, "g_pop_rdi")
    assert (block.label, how) == ("checksum", "interior")
    assert block.interior_index("g_pop_rdi") == 2


def test_block_at_external(toy_cfg):
    with pytest.raises(NotFound):
        block_at(toy_cfg, "strcpy")


def test_opaque_line_blocks_diversification():
    cfg = build_cfg(parse_program("main:\n\tmov %rax,%rcx\n\trep stosb\n\tpop %rdi\n\tret\n"), "main")
    block = cfg.block(0)
    assert not block.diversifiable
    assert block.clean_start == 1
    assert len(block.instructions) == 3


def test_code_after_ret_is_not_selectable():
    cfg = build_cfg(parse_program("main:\n\tret\n\tpop %rdi\n\tret\n"), "main")
    assert cfg.block(1).label == ".B1"
    assert not cfg.block(1).selectable


def test_isomorphism_and_json(toy_cfg, toy_program):
    assert toy_cfg.is_isomorphic_to(build_cfg(toy_program, "main"))
    data = toy_cfg.to_dict()
    assert data["entry"] == 0
    assert len(data["nodes"]) == 13
