#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Test Generation Module
Random and coverage-guided fuzz test suites for a single basic block.

The fuzzer drives a harnessed copy of the block: a preamble redirects the
fuzz input registers into the locations the block reads, and every exit of
the block is an abort site whose id buckets the execution path.
"""

import logging
import random
import warnings
from dataclasses import dataclass, field

from errors import CoverageIncomplete, InvalidCount, MultiSlotUnsupported
from micro_emulator import run_block
from models.basic_block import BasicBlock, TerminatorKind
from models.instruction import FLAGS, Instruction, Mem, Reg, register
from models.machine_state import MASK64, STACK_POINTER, MachineState
from models.test_case import CaseOrigin, TestCase
from utils.bit_ops import derive_seed

logger = logging.getLogger(__name__)

INPUT_REGISTERS = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")

BOUNDARY_VALUES = (
    0, 1, MASK64, (1 << 63) - 1, 1 << 63,
    1 << 7, 1 << 8, 1 << 15, 1 << 16, 1 << 31, 1 << 32,
)

DEFAULT_SUITE_SIZE = 32
DEFAULT_FUZZ_RATIO = 0.25
DEFAULT_FUZZ_BUDGET = 50000
PLATEAU = 2000

_POINTER_BASE = 0x10000000
_POINTER_STRIDE = 0x100000
_SYMBOL_BASE = 0x600000
_SYMBOL_STRIDE = 0x1000

SITE_FAULT = 0
SITE_TAKEN = 1
SITE_FALLTHROUGH = 2


@dataclass
class InputLayout:
    """Concrete addresses backing a block's memory locations"""

    pointers: dict = field(default_factory=dict)
    symbols: dict = field(default_factory=dict)
    regions: list = field(default_factory=list)

    @property
    def footprint(self):
        return sorted(self.regions)


def _instructions(block):
    return tuple(block.instructions) if isinstance(block, BasicBlock) else tuple(block)


def input_layout(live):
    """
    Assign addresses to the pointer registers and symbols a block uses

    Base registers get disjoint 1 MiB windows, index registers hold 1 and
    rsp keeps the stack pointer, so every memory location in the live set
    lands at a known address.
    """
    layout = InputLayout()
    locations = sorted(live.memory("reads") + live.memory("writes"), key=str)
    bases, indexes, symbols = [], [], []
    for loc in locations:
        if loc.base and loc.base != "rsp" and loc.base not in bases:
            bases.append(loc.base)
        if loc.index and loc.index not in indexes:
            indexes.append(loc.index)
        if loc.symbol and loc.symbol not in symbols:
            symbols.append(loc.symbol)
    for k, reg in enumerate(bases):
        layout.pointers[reg] = _POINTER_BASE + k * _POINTER_STRIDE
    for reg in indexes:
        layout.pointers.setdefault(reg, 1)
    for k, symbol in enumerate(symbols):
        layout.symbols[symbol] = _SYMBOL_BASE + k * _SYMBOL_STRIDE
    for loc in locations:
        address = loc.disp
        if loc.base:
            address += STACK_POINTER if loc.base == "rsp" else layout.pointers[loc.base]
        if loc.index:
            address += layout.pointers[loc.index] * loc.scale
        if loc.symbol:
            address += layout.symbols[loc.symbol]
        region = (address & MASK64, (address + loc.width) & MASK64)
        if region not in layout.regions:
            layout.regions.append(region)
    return layout


def base_state(layout, rng):
    """random registers, flags and footprint bytes around the fixed pointers"""
    regs = [rng.getrandbits(64) for _ in range(16)]
    regs[4] = STACK_POINTER
    state = MachineState(regs, {flag: bool(rng.getrandbits(1)) for flag in FLAGS},
                         footprint=layout.footprint, symbols=dict(layout.symbols))
    for name, value in layout.pointers.items():
        state.set_reg(name, value)
    for start, end in layout.regions:
        for address in range(start, end):
            state.mem[address] = rng.getrandbits(8)
    return state


def _mem_operand(loc):
    if loc.base is None and loc.index is None:
        return Mem(disp=loc.disp, symbol=loc.symbol, rip=loc.symbol is not None)
    return Mem(
        base=register(loc.base) if loc.base else None,
        index=register(loc.index) if loc.index else None,
        scale=loc.scale,
        disp=loc.disp,
        symbol=loc.symbol,
    )


@dataclass
class Harness:
    preamble: tuple
    body: tuple
    exits: dict
    assignments: dict
    inputs: tuple = ()
    unmapped: tuple = ()

    def input_state(self, base, values, flags=None):
        """state the block starts from once the preamble has run"""
        state = base.copy()
        for reg, value in zip(self.inputs, values):
            state.set_reg(reg, value)
        if flags is not None:
            state.flags = dict(flags)
        result = run_block(state, self.preamble)
        return result.state if result.normal else None

    def site(self, result):
        if not result.normal:
            return SITE_FAULT
        if "taken" in self.exits:
            taken = result.path[-1][1] if result.path else False
            return self.exits["taken"] if taken else self.exits["fallthrough"]
        return self.exits["exit"]

    def run(self, base, values, flags=None):
        """
        Execute preamble and body

        Returns:
            (abort site id, ExecResult)
        """
        state = base.copy()
        for reg, value in zip(self.inputs, values):
            state.set_reg(reg, value)
        if flags is not None:
            state.flags = dict(flags)
        result = run_block(state, self.preamble + self.body)
        return self.site(result), result

    def to_dict(self):
        return {
            "preamble": [instr.canonical() for instr in self.preamble],
            "exits": dict(self.exits),
            "assignments": dict(self.assignments),
            "unmapped": list(self.unmapped),
        }


def build_harness(block, live, layout=None):
    """
    Redirect fuzz input registers into the block's live-in locations

    Read registers that are themselves input registers keep their own
    value; the remaining locations take the free input registers in order.

    Returns:
        Harness
    """
    layout = layout or input_layout(live)
    instructions = _instructions(block)
    pinned = set(layout.pointers) | {"rsp"}
    targets = [reg for reg in live.registers("reads") if reg not in pinned]
    targets += live.memory("reads")
    free = [reg for reg in INPUT_REGISTERS if reg not in pinned and reg not in targets]
    assignments, preamble, unmapped = {}, [], []
    used = []
    for loc in targets:
        if isinstance(loc, str) and loc in INPUT_REGISTERS:
            assignments[loc] = loc
            used.append(loc)
            continue
        if not free:
            unmapped.append(str(loc))
            continue
        source = free.pop(0)
        used.append(source)
        assignments[str(loc)] = source
        if isinstance(loc, str):
            preamble.append(Instruction("mov", (Reg(register(source)), Reg(register(loc)))))
        else:
            preamble.append(Instruction("mov", (Reg(register(source, loc.width * 8)), _mem_operand(loc))))
    if unmapped:
        message = f"{len(unmapped)} live-in location(s) left to random bytes: {', '.join(unmapped)}"
        logger.warning(message)
        warnings.warn(MultiSlotUnsupported(message), stacklevel=2)
    kind = block.terminator.kind if isinstance(block, BasicBlock) else None
    if kind is None and instructions and instructions[-1].is_conditional:
        kind = TerminatorKind.COND_JMP
    if kind is TerminatorKind.COND_JMP:
        exits = {"taken": SITE_TAKEN, "fallthrough": SITE_FALLTHROUGH}
    else:
        exits = {"exit": SITE_TAKEN}
    return Harness(
        tuple(preamble), instructions, exits, assignments,
        tuple(reg for reg in INPUT_REGISTERS if reg in used), tuple(unmapped),
    )


def gen_random_cases(block, live, n, seed):
    """
    Uniformly random inputs with expectations from the original block

    Inputs on which the original faults are dropped and redrawn.

    Raises:
        InvalidCount: n < 1
    """
    if n < 1:
        raise InvalidCount("n", n)
    instructions = _instructions(block)
    layout = input_layout(live)
    rng = random.Random(seed)
    cases = []
    attempts = 0
    while len(cases) < n and attempts < n * 8:
        attempts += 1
        state = base_state(layout, rng)
        expected = run_block(state, instructions)
        if not expected.normal:
            continue
        cases.append(TestCase(state, expected, CaseOrigin.RANDOM))
    if len(cases) < n:
        logger.warning("only %d of %d random cases run cleanly on the original", len(cases), n)
    return cases


def _signature(site, result, written):
    if not result.normal:
        return (site,)
    state = result.state
    classes = []
    for reg in written:
        value = state.get_reg(reg)
        classes.append(0 if value == 0 else 1 if value >> 63 else 2)
    return (site, tuple(state.flags[flag] for flag in FLAGS), tuple(classes))


class _Fuzzer:
    def __init__(self, harness, base, written, rng):
        self.harness = harness
        self.base = base
        self.written = written
        self.rng = rng
        self.width = len(harness.inputs)
        self.corpus = []
        self.sites = {}
        self.signatures = set()
        self.executions = 0
        self.last_new = 0

    def execute(self, values, flags):
        self.executions += 1
        site, result = self.harness.run(self.base, values, flags)
        signature = _signature(site, result, self.written)
        if site in self.sites and signature in self.signatures:
            return False
        if site not in self.sites:
            self.sites[site] = len(self.corpus)
        self.signatures.add(signature)
        self.corpus.append((tuple(values), dict(flags), site))
        self.last_new = self.executions
        return True

    def mutate(self, values, flags):
        values = list(values)
        flags = dict(flags)
        for _ in range(self.rng.randint(1, 3)):
            choice = self.rng.randrange(5) if self.width else 4
            if choice == 4:
                flag = self.rng.choice(FLAGS)
                flags[flag] = not flags[flag]
                continue
            i = self.rng.randrange(self.width)
            if choice == 0:
                values[i] ^= 1 << self.rng.randrange(64)
            elif choice == 1:
                step = self.rng.randint(1, 35)
                values[i] = (values[i] + (step if self.rng.getrandbits(1) else -step)) & MASK64
            elif choice == 2:
                donor = self.rng.choice(self.corpus)[0]
                keep = (1 << (8 * self.rng.randint(1, 7))) - 1
                values[i] = (values[i] & ~keep & MASK64) | (donor[i] & keep)
            else:
                values[i] = self.rng.choice(BOUNDARY_VALUES)
        return values, flags


def _seed_inputs(width):
    """uniform and rotated boundary vectors with alternating flags, then all-set and all-clear flags"""
    seeds = []
    count = len(BOUNDARY_VALUES)
    for j, value in enumerate(BOUNDARY_VALUES):
        seeds.append(([value] * width, {flag: bool(j % 2) for flag in FLAGS}))
        seeds.append(([BOUNDARY_VALUES[(j + i) % count] for i in range(width)],
                      {flag: not bool(j % 2) for flag in FLAGS}))
    flag_seeds = [([0] * width, {flag: True for flag in FLAGS}), ([0] * width, {flag: False for flag in FLAGS})]
    return seeds, flag_seeds


def gen_fuzz_cases(block, live, budget=DEFAULT_FUZZ_BUDGET, seed=0):
    """
    Coverage-guided mutational test generation

    Inputs are kept when they reach a new abort site or a new path
    signature (site, output flags, zero/sign class of written registers).
    Input flags are always part of the mutation space.

    Returns:
        TestCase list: one representative per site first, then the
        all-flags-set and all-flags-clear cases, then the rest of the corpus
    """
    if budget < 1:
        raise InvalidCount("budget", budget)
    instructions = _instructions(block)
    layout = input_layout(live)
    rng = random.Random(seed)
    base = base_state(layout, rng)
    harness = build_harness(block, live, layout)
    written = [reg for reg in live.registers("writes") if reg != "rsp"]
    fuzzer = _Fuzzer(harness, base, written, rng)
    expected_sites = set(harness.exits.values())

    seeds, flag_seeds = _seed_inputs(fuzzer.width)
    for values, flags in flag_seeds + seeds:
        if fuzzer.executions >= budget:
            break
        fuzzer.execute(values, flags)
    flag_entries = {(tuple(values), tuple(sorted(flags.items()))) for values, flags in flag_seeds}

    while fuzzer.executions < budget:
        covered = expected_sites <= set(fuzzer.sites)
        if covered and fuzzer.executions - fuzzer.last_new >= PLATEAU:
            break
        parent_values, parent_flags, _ = rng.choice(fuzzer.corpus)
        values, flags = fuzzer.mutate(parent_values, parent_flags)
        fuzzer.execute(values, flags)

    missing = sorted(expected_sites - set(fuzzer.sites))
    if missing:
        message = f"abort site(s) {missing} not reached after {fuzzer.executions} executions"
        logger.warning(message)
        warnings.warn(CoverageIncomplete(message), stacklevel=2)

    order = [fuzzer.sites[site] for site in sorted(fuzzer.sites)]
    order += [i for i, (values, flags, _) in enumerate(fuzzer.corpus)
              if (values, tuple(sorted(flags.items()))) in flag_entries]
    order += range(len(fuzzer.corpus))
    cases, seen = [], set()
    for i in order:
        if i in seen:
            continue
        seen.add(i)
        values, flags, site = fuzzer.corpus[i]
        if site == SITE_FAULT:
            continue
        state = harness.input_state(base, values, flags)
        if state is None:
            continue
        expected = run_block(state, instructions)
        if expected.normal:
            cases.append(TestCase(state, expected, CaseOrigin.FUZZ, site))
    logger.debug("fuzzing: %d executions, sites %s, %d cases", fuzzer.executions, sorted(fuzzer.sites), len(cases))
    return cases


def build_suite(block, live, size=DEFAULT_SUITE_SIZE, fuzz_ratio=DEFAULT_FUZZ_RATIO,
                seed=0, fuzz_budget=DEFAULT_FUZZ_BUDGET):
    """
    Mix fuzz-derived and random cases into one suite

    The fuzz share always keeps every site representative and both flag
    boundary cases, even when that exceeds the ratio.
    """
    if size < 1:
        raise InvalidCount("size", size)
    fuzz = gen_fuzz_cases(block, live, fuzz_budget, derive_seed(seed, "fuzz"))
    keep = len({case.bucket for case in fuzz}) + 2
    fuzz = fuzz[:max(round(size * fuzz_ratio), keep)]
    remaining = size - len(fuzz)
    random_cases = gen_random_cases(block, live, remaining, derive_seed(seed, "random")) if remaining > 0 else []
    return fuzz + random_cases
