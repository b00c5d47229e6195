#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Synthesizer Module
Metropolis-Hastings search for size-bounded, test-equivalent rewrites of a
single basic block. The block is turned into a ret-terminated unit, searched
over, validated on held-out cases and given its original exit back.
"""

import itertools
import logging
import math
import random

from encoder import encoded_length, instruction_at_offset, instruction_length
from errors import InvalidCount, NonDiversifiable, PartialResult, SynthesisNotFound, UnsupportedInstruction
from gadget_scanner import gadget_effect, gadget_holds
from micro_emulator import memory_address, project_and_compare, run_block
from models.basic_block import TerminatorKind
from models.gadget import GadgetKind
from models.instruction import (
    BINARY_ALU, FLAGS, GPR64, SHIFTS, SIGNATURES, UNARY_ALU, WIDTH_SUFFIX,
    Imm, Instruction, Mem, Reg, register, validate_instruction,
)
from models.machine_state import MASK64
from models.rewrite import MOVES, CostRecord, GadgetProbe, RewriteCandidate, SynthesisConfig, SynthesisUnit, canonical_form
from models.test_case import TestCase
from testgen import base_state, gen_random_cases, input_layout
from utils.bit_ops import derive_seed, mask

logger = logging.getLogger(__name__)

RET = Instruction("ret")

# comparing every register also catches writes the original never makes
ALL_REGISTERS = list(range(16))

OPCODE_POOL = ("mov", "movabs", "lea", "push", "pop", "nop") + BINARY_ALU + ("cmp", "test") + UNARY_ALU + SHIFTS

SMALL_IMMEDIATES = (0, 1, -1, 2, 4, 8)

EXHAUSTIVE_ENTROPY = 16


def to_synthesis_unit(block, live, records=()):
    """
    Turn a block into a ret-terminated synthesis unit

    Args:
        block: BasicBlock
        live: its LiveSet
        records: gadget records of the program; those in this block become
            probes the search tries to break

    Raises:
        NonDiversifiable: opaque lines or an indirect exit
    """
    if not block.diversifiable or block.terminator.indirect:
        raise NonDiversifiable(f"block {block.label} cannot be rewritten")
    instructions = tuple(block.instructions)
    kind = block.terminator.kind
    if kind is TerminatorKind.FALLTHROUGH:
        body = instructions + (RET,)
        terminator = None
        tail_length = 0
    else:
        body = instructions[:-1] + (RET,)
        terminator = instructions[-1]
        tail_length = instruction_length(terminator)

    probes = []
    seen = set()
    for record in records:
        if record.block_id != block.id or record.gadget_class.kind is GadgetKind.CALL:
            continue
        # an equivalent rewrite always keeps the effect at the block entry
        if record.offset == 0:
            continue
        key = (record.offset, record.gadget_class)
        if key in seen:
            continue
        seen.add(key)
        expected = gadget_effect(instructions[record.index:], record.gadget_class)
        if expected is not None:
            probes.append(GadgetProbe(record.offset, record.gadget_class, expected))

    return SynthesisUnit(
        block_id=block.id,
        label=block.label,
        body=body,
        original=instructions,
        original_terminator=terminator,
        check_flags=kind is TerminatorKind.COND_JMP,
        live=live,
        size_budget=encoded_length(instructions),
        tail_length=tail_length,
        probes=tuple(probes),
    )


def _surviving_gadgets(restored, probes):
    surviving = 0
    for probe in probes:
        index = instruction_at_offset(restored, probe.offset)
        if index is None:
            continue
        if gadget_holds(restored[index:], probe.gadget_class, probe.expected):
            surviving += 1
    return surviving


def cost(candidate, unit, suite, config=None, bound=math.inf):
    """
    Cost of a ret-terminated candidate body against the suite

    Evaluation stops early once the running total exceeds bound; the
    returned record then has total > bound.

    Raises:
        InvalidCount: empty suite
    """
    if not suite:
        raise InvalidCount("suite", 0)
    config = config or SynthesisConfig()
    restored_length = encoded_length(candidate[:-1]) + unit.tail_length
    size_excess = max(0, restored_length - unit.size_budget)
    assumed_gadgets = len(unit.probes)
    fixed = config.size_penalty_weight * size_excess + config.gadget_weight * assumed_gadgets
    correctness = 0
    faults = 0
    for case in suite:
        result = run_block(case.input, candidate)
        if not result.normal:
            correctness += config.fault_penalty
            faults += 1
        else:
            correctness += project_and_compare(
                case.expected.state, result.state, ALL_REGISTERS, unit.check_flags, config.flag_weight,
            )
        if fixed + correctness > bound:
            return CostRecord(correctness, size_excess, assumed_gadgets, fixed + correctness, faults)
    gadgets = assumed_gadgets
    if correctness == 0 and size_excess == 0 and unit.probes:
        gadgets = _surviving_gadgets(unit.restore(candidate), unit.probes)
    total = correctness + config.size_penalty_weight * size_excess + config.gadget_weight * gadgets
    return CostRecord(correctness, size_excess, gadgets, total, faults)


class InstructionPool:
    def __init__(self, unit):
        """
        Operands and mnemonics the search may draw from

        Args:
            unit: SynthesisUnit whose original body seeds the pool
        """
        body = [instr for instr in unit.body if not instr.is_control]
        registers = {loc for loc in unit.live.reads | unit.live.writes if isinstance(loc, str) and loc in GPR64}
        immediates = set(SMALL_IMMEDIATES)
        memory = []
        widths = set()
        for instr in body:
            if instr.width:
                widths.add(instr.width)
            for op in instr.operands:
                if isinstance(op, Reg):
                    registers.add(op.register.parent)
                elif isinstance(op, Imm):
                    immediates.update((op.value, -op.value))
                elif isinstance(op, Mem):
                    registers.update(reg.parent for reg in op.registers())
                    if op not in memory:
                        memory.append(op)
        if "rsp" in registers:
            for stack_slot in (Mem(base=register("rsp")), Mem(base=register("rsp"), disp=8)):
                if stack_slot not in memory:
                    memory.append(stack_slot)
        self.registers = sorted(registers, key=GPR64.index)
        self.immediates = sorted(immediates)
        self.memory = memory
        self.widths = sorted(widths or {64})
        available = {"i", "r"} | ({"m"} if memory else set())
        self.mnemonics = [m for m in OPCODE_POOL if any(set(shape) <= available for shape in SIGNATURES[m])]

    def register_operand(self, rng, width):
        parent = rng.choice(self.registers) if self.registers else "rax"
        return Reg(register(parent, width))

    def operand_like(self, rng, op):
        if isinstance(op, Reg):
            return self.register_operand(rng, op.register.width)
        if isinstance(op, Imm):
            return Imm(rng.choice(self.immediates))
        if isinstance(op, Mem) and self.memory:
            return rng.choice(self.memory)
        return None

    def random_instruction(self, rng, attempts=8):
        for _ in range(attempts):
            m = rng.choice(self.mnemonics)
            shape = rng.choice(SIGNATURES[m])
            width = rng.choice(self.widths)
            if m in ("push", "pop"):
                width = 64
            operands = []
            for kind in shape:
                if kind == "i":
                    operands.append(Imm(rng.choice(self.immediates)))
                elif kind == "r":
                    operands.append(self.register_operand(rng, width))
                elif kind == "m" and self.memory:
                    operands.append(rng.choice(self.memory))
                else:
                    operands = None
                    break
            if operands is None:
                continue
            if m in SHIFTS and shape in ("rr", "rm"):
                operands[0] = Reg(register("rcx", 8))
            instr = Instruction(m, tuple(operands))
            if instr.width is None:
                instr = Instruction(m, tuple(operands), WIDTH_SUFFIX[width])
            if _valid(instr):
                return instr
        return None


def _valid(instr):
    try:
        validate_instruction(instr)
        instruction_length(instr)
    except (KeyError, ValueError, UnsupportedInstruction):
        return False
    return True


def propose(body, pool, rng, move):
    """
    Apply one move to a ret-terminated body

    Returns:
        new body tuple, or None when the move does not apply
    """
    head = list(body[:-1])
    if move == "opcode":
        if not head:
            return None
        i = rng.randrange(len(head))
        instr = head[i]
        choices = [m for m in pool.mnemonics if m != instr.mnemonic and instr.shape in SIGNATURES[m]]
        if not choices:
            return None
        head[i] = Instruction(rng.choice(choices), instr.operands, instr.suffix)
    elif move == "operand":
        candidates = [(i, j) for i, instr in enumerate(head) for j in range(len(instr.operands))]
        if not candidates:
            return None
        i, j = rng.choice(candidates)
        instr = head[i]
        replacement = pool.operand_like(rng, instr.operands[j])
        if replacement is None:
            return None
        operands = list(instr.operands)
        operands[j] = replacement
        head[i] = Instruction(instr.mnemonic, tuple(operands), instr.suffix)
    elif move == "swap":
        if len(head) < 2:
            return None
        i = rng.randrange(len(head) - 1)
        head[i], head[i + 1] = head[i + 1], head[i]
    elif move == "insert":
        instr = pool.random_instruction(rng)
        if instr is None:
            return None
        head.insert(rng.randrange(len(head) + 1), instr)
    elif move == "delete":
        if not head:
            return None
        del head[rng.randrange(len(head))]
    else:
        raise ValueError(f"unknown move {move}")
    if move in ("opcode", "operand") and not _valid(head[i]):
        return None
    return tuple(head) + (body[-1],)


def _register_bits(instructions, reg):
    """widest operand naming reg; 64 when it forms an address"""
    bits = 0
    for instr in instructions:
        for op in instr.operands:
            if isinstance(op, Reg) and op.register.parent == reg:
                bits = max(bits, op.register.width)
            elif isinstance(op, Mem) and reg in (r.parent for r in op.registers()):
                return 64
    return bits or 64


def _input_bits(unit, layout):
    """(location, bits) of every live-in input; pointers and rsp stay fixed"""
    live = unit.live
    pinned = set(layout.pointers) | {"rsp"}
    inputs = [(flag, 1) for flag in live.flags("reads")]
    inputs += [(reg, _register_bits(unit.original, reg)) for reg in live.registers("reads") if reg not in pinned]
    inputs += [(loc, loc.width * 8) for loc in live.memory("reads")]
    return inputs


def _assign(state, location, bits, value):
    if location in FLAGS:
        state.flags[location] = bool(value)
    elif isinstance(location, str):
        state.set_reg(location, (state.get_reg(location) & ~mask(bits)) | value)
    else:
        address = memory_address(state, location)
        for offset in range(location.width):
            state.mem[(address + offset) & MASK64] = (value >> (8 * offset)) & 0xFF


def exhaustive_cases(unit, rng):
    """the whole input domain when the live-in locations span at most EXHAUSTIVE_ENTROPY bits"""
    layout = input_layout(unit.live)
    inputs = _input_bits(unit, layout)
    if sum(bits for _, bits in inputs) > EXHAUSTIVE_ENTROPY:
        return []
    base = base_state(layout, rng)
    cases = []
    for values in itertools.product(*(range(1 << bits) for _, bits in inputs)):
        state = base.copy()
        for (location, bits), value in zip(inputs, values):
            _assign(state, location, bits, value)
        cases.append(TestCase.for_block(unit.original, state))
    return [case for case in cases if case.expected.normal]


def _validate(candidate_body, unit, suite, config, seed):
    """held-out random cases plus the exhaustive domain when it is small"""
    rng = random.Random(seed)
    holdout = gen_random_cases(unit.original, unit.live, max(1, config.holdout_factor * len(suite)), seed)
    holdout += exhaustive_cases(unit, rng)
    failing = []
    for case in holdout:
        if cost(candidate_body, unit, [case], config).correctness:
            failing.append(case)
    return failing


def mcmc_search(unit, suite, config=None, forbidden=(), seed=None):
    """
    Search for one validated rewrite not in forbidden

    Args:
        unit: SynthesisUnit
        suite: TestCase list
        config: SynthesisConfig
        forbidden: canonical forms that may not be returned
        seed: search seed, config.seed when omitted

    Returns:
        RewriteCandidate with validated=True

    Raises:
        SynthesisNotFound: no validated candidate after every restart
    """
    config = config or SynthesisConfig()
    seed = config.seed if seed is None else seed
    if not suite:
        raise InvalidCount("suite", 0)
    suite = list(suite)
    forbidden = set(forbidden) | {canonical_form(unit.body)}
    pool = InstructionPool(unit)
    moves = [move for move in MOVES if config.move_weights.get(move, 0) > 0]
    weights = [config.move_weights[move] for move in moves]

    for restart in range(config.restarts):
        rng = random.Random(derive_seed(seed, "restart", restart))
        current = unit.body
        current_cost = cost(current, unit, suite, config).total
        best, best_cost = None, None
        since_best = 0
        for _ in range(config.iterations):
            since_best += 1
            if since_best > config.patience:
                break
            move = rng.choices(moves, weights)[0]
            proposal = propose(current, pool, rng, move)
            if proposal is None:
                continue
            # acceptance threshold drawn before evaluation so cost() can stop early
            bound = current_cost - math.log(1.0 - rng.random()) / config.beta
            record = cost(proposal, unit, suite, config, bound)
            if record.total > bound:
                continue
            current, current_cost = proposal, record.total
            if not record.correct or canonical_form(proposal) in forbidden:
                continue
            if best is None or record.total < best_cost.total:
                best, best_cost = proposal, record
                since_best = 0
                if record.gadgets == 0:
                    break
        if best is None:
            logger.debug("block %s restart %d: no candidate", unit.label, restart)
            continue
        failing = _validate(best, unit, suite, config, derive_seed(seed, "holdout", restart))
        if failing:
            logger.debug("block %s restart %d: candidate failed %d held-out cases", unit.label, restart, len(failing))
            suite.extend(failing)
            forbidden.add(canonical_form(best))
            continue
        return RewriteCandidate(best, best_cost, True, unit.restore(best))
    raise SynthesisNotFound(f"no rewrite of block {unit.label} after {config.restarts} restart(s)")


def generate_n_rewrites(block, live, suite, config=None, records=()):
    """
    Up to N pairwise distinct validated rewrites with the exit restored

    Raises:
        NonDiversifiable: the block cannot be a synthesis unit
        PartialResult: fewer than N were found; carries the ones that were
    """
    config = config or SynthesisConfig()
    unit = to_synthesis_unit(block, live, records)
    forbidden = {canonical_form(unit.body)}
    rewrites = []
    for k in range(config.n_rewrites):
        try:
            candidate = mcmc_search(unit, suite, config, forbidden, derive_seed(config.seed, unit.block_id, k))
        except SynthesisNotFound as exc:
            logger.info("%s", exc)
            continue
        forbidden.add(candidate.canonical())
        rewrites.append(candidate)
        logger.debug("block %s rewrite %d: %s", unit.label, k, candidate.canonical())
    if len(rewrites) < config.n_rewrites:
        raise PartialResult(rewrites, config.n_rewrites)
    return rewrites
