#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json

import pytest

from asm_parser import parse_instruction
from models.diversity import ChoiceStrategy, DiversityPlan, PayloadGadget, PayloadSpec
from models.gadget import GadgetClass, GadgetKind
from models.instruction import Instruction
from models.machine_state import MachineState
from models.rewrite import CostRecord, RewriteCandidate, SynthesisConfig

from conftest import read_text


def _candidate(*texts):
    restored = tuple(parse_instruction(text) for text in texts)
    return RewriteCandidate(restored[:-1] + (Instruction("ret"),), CostRecord(), True, restored)


@pytest.fixture
def plan(toy_cfg):
    plan = DiversityPlan(entry="main", seed=9)
    plan.add(toy_cfg.block_for_label("checksum"), [
        _candidate("xor %edx,%edx", "pop %rdi", "mov %rax,%rcx", "ret"),
        _candidate("pop %rdi", "xor %edx,%edx", "mov %rax,%rcx", "ret"),
    ])
    plan.add(toy_cfg.block_for_label("copy_len"), [_candidate("lea 0x8(%rdi),%rax", "pop %rsi", "ret")])
    plan.add(toy_cfg.block_for_label("scale"), [
        _candidate("pop %rdx", "mov %rsi,%rcx", "shl $0x2,%rcx", "ret"),
        _candidate("mov %rsi,%rcx", "pop %rdx", "shl $0x2,%rcx", "ret"),
        _candidate("mov %rsi,%rcx", "shl $0x2,%rcx", "pop %rdx", "ret"),
    ])
    return plan


def test_modulo_choices(plan):
    assert plan.choices(0) == {10: 0, 11: 0, 12: 0}
    assert plan.choices(4) == {10: 0, 11: 0, 12: 1}
    assert plan.min_available() == 1
    assert plan


def test_random_choices_are_seeded(plan):
    plan.strategy = ChoiceStrategy.RANDOM
    picks = [plan.choices(k) for k in range(6)]
    assert picks == [plan.choices(k) for k in range(6)]
    for pick in picks:
        assert 0 <= pick[10] < 2 and pick[11] == 0 and 0 <= pick[12] < 3


def test_block_subsets(plan):
    plan.max_blocks = 1
    for k in range(4):
        assert len(plan.blocks_for(k)) == 1
        assert plan.blocks_for(k) == plan.blocks_for(k)
        assert set(plan.choices(k)) == set(plan.blocks_for(k))


def test_empty_plan_is_false():
    plan = DiversityPlan(entry="main")
    assert not plan
    assert plan.choices(0) == {}
    assert plan.min_available() == 0


def test_plan_round_trip(plan):
    loaded = DiversityPlan.from_dict(json.loads(json.dumps(plan.to_dict())))
    assert loaded.entry == "main"
    assert loaded.seed == 9
    assert loaded.labels == {10: "checksum", 11: "copy_len", 12: "scale"}
    for block_id, rewrites in plan.selections.items():
        assert [c.canonical() for c in loaded.selections[block_id]] == [c.canonical() for c in rewrites]
        assert all(c.validated for c in loaded.selections[block_id])


def test_payload_spec_from_json(payload_path):
    payload = PayloadSpec.from_dict(json.loads(read_text(payload_path)))
    assert [gadget.label for gadget in payload.gadgets] == ["g_pop_rdi", "g_pop_rsi", "g_pop_rdx", "g_call_system"]
    assert payload.gadgets[0].gadget_class == GadgetClass.change_register("rdi")
    assert payload.gadgets[3].gadget_class == GadgetClass.call("system")
    assert PayloadSpec.from_dict(payload.to_dict()) == payload


def test_payload_register_may_carry_a_percent():
    gadget = PayloadGadget.from_dict({"label": "g", "class": "ChangeRegister", "target_reg": "%rsi"})
    assert gadget.gadget_class.target == "rsi"
    memory = PayloadGadget.from_dict({"label": "m", "class": "ChangeMemory"})
    assert memory.gadget_class.kind is GadgetKind.CHANGE_MEMORY


def test_synthesis_config_round_trip():
    config = SynthesisConfig(n_rewrites=2, iterations=50, seed=4)
    assert SynthesisConfig.from_dict({**config.to_dict(), "unknown": 1}) == config


def test_machine_state_round_trip():
    state = MachineState(footprint=((0x1000, 0x1010),), symbols={"buf": 0x600000})
    state.set_reg("rax", 0xDEADBEEF)
    state.flags["ZF"] = True
    state.write_memory(0x1000, 8, 0x1122334455667788)
    loaded = MachineState.from_dict(state.to_dict())
    assert loaded == state
    assert loaded.footprint == state.footprint
    assert loaded.symbols == {"buf": 0x600000}
