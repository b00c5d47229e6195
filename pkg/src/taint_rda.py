#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Taint RDA Module
Interprocedural reaching-definitions taint analysis rooted at the entry
function. Observation points sit at library calls; a call site whose risky
callee receives tainted arguments marks its block as Type M.
"""

import logging

from errors import InvalidCount, NotFound
from gadget_scanner import callee_name
from models.basic_block import TerminatorKind
from models.instruction import BINARY_ALU, SHIFTS, UNARY_ALU, Imm, Mem, Reg
from models.taint import Definition, ObservationPoint, PointResult

logger = logging.getLogger(__name__)

ARGUMENT_REGISTERS = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
CALLER_SAVED = ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")

DEFAULT_DEPTH_LIMIT = 8
DEFAULT_SOURCE_REGISTERS = ("rdi", "rsi")
DEFAULT_INPUT_CALLEES = ("read", "recv", "fgets", "getenv")
DEFAULT_RISKY_CALLEES = ("strcpy", "strcat", "memcpy", "sprintf", "gets", "memmove")

# callee -> (argument registers examined, registers whose pointee is also examined)
CALLEE_ARGS = {
    "strcpy": (("rdi", "rsi"), ("rsi",)),
    "strcat": (("rdi", "rsi"), ("rsi",)),
    "strncpy": (("rdi", "rsi", "rdx"), ("rsi",)),
    "memcpy": (("rdi", "rsi", "rdx"), ("rsi",)),
    "memmove": (("rdi", "rsi", "rdx"), ("rsi",)),
    "sprintf": (ARGUMENT_REGISTERS, ("rsi", "rdx", "rcx", "r8", "r9")),
    "printf": (ARGUMENT_REGISTERS, ARGUMENT_REGISTERS),
    "gets": (("rdi",), ()),
    "system": (("rdi",), ("rdi",)),
}

# input callee -> register pointing at the buffer it fills
INPUT_BUFFERS = {"read": "rsi", "recv": "rsi", "fgets": "rdi", "gets": "rdi", "getenv": None}

# destination pointee receives the taint of the source pointee
COPY_CALLEES = {"strcpy": ("rdi", "rsi"), "strcat": ("rdi", "rsi"), "strncpy": ("rdi", "rsi"),
                "memcpy": ("rdi", "rsi"), "memmove": ("rdi", "rsi"), "sprintf": ("rdi", "rdx")}

# library functions whose return value never carries outside data
KNOWN_CLEAN = ("strlen", "strcmp", "strncmp", "memcmp", "printf", "puts", "putchar", "malloc",
               "calloc", "free", "exit", "abort", "atoi", "close", "open", "write", "system",
               "execve", "execlp", "mprotect", "memset")


class TaintSources:
    def __init__(self, registers=DEFAULT_SOURCE_REGISTERS, input_callees=DEFAULT_INPUT_CALLEES):
        """
        Where outside data enters the program

        Args:
            registers: argument registers of the entry function
            input_callees: library calls whose result and buffer are tainted
        """
        self.registers = tuple(registers)
        self.input_callees = tuple(input_callees)


class _TaintState:
    """abstract state at one program point"""

    __slots__ = ("tainted", "defs", "pointers", "rsp")

    def __init__(self, tainted=(), defs=None, pointers=None, rsp=0):
        self.tainted = set(tainted)
        self.defs = dict(defs or {})
        self.pointers = dict(pointers or {})
        self.rsp = rsp

    def copy(self):
        return _TaintState(self.tainted, self.defs, self.pointers, self.rsp)

    def join(self, other):
        merged = _TaintState(self.tainted | other.tainted)
        for subject in self.defs.keys() | other.defs.keys():
            merged.defs[subject] = self.defs.get(subject, frozenset()) | other.defs.get(subject, frozenset())
        merged.pointers = {reg: p for reg, p in self.pointers.items() if other.pointers.get(reg) == p}
        merged.rsp = self.rsp if self.rsp == other.rsp else None
        return merged

    def __eq__(self, other):
        return (self.tainted == other.tainted and self.defs == other.defs
                and self.pointers == other.pointers and self.rsp == other.rsp)

    def define(self, subject, tainted, site):
        if tainted:
            self.tainted.add(subject)
        else:
            self.tainted.discard(subject)
        self.defs[subject] = frozenset((site,))

    def key(self):
        return (frozenset(self.tainted), frozenset(self.pointers.items()), self.rsp)


class _FunctionResult:
    def __init__(self, exit_state, warnings):
        self.exit_state = exit_state
        self.warnings = warnings


class TaintAnalyzer:
    def __init__(self, cfg, sources=None, depth_limit=DEFAULT_DEPTH_LIMIT):
        """
        Reaching-definitions taint analysis over one CFG

        Args:
            cfg: Cfg of the program
            sources: TaintSources
            depth_limit: deepest child analysis below the entry function
        """
        if depth_limit < 1:
            raise InvalidCount("depth_limit", depth_limit)
        self.cfg = cfg
        self.sources = sources or TaintSources()
        self.depth_limit = depth_limit
        self.points = {}
        self.results = {}
        self._memo = {}
        self._active = []
        self._globals = {
            op.symbol
            for instr in cfg.program.instructions()
            for op in instr.operands
            if isinstance(op, Mem) and op.symbol
        }

    def analyze(self, entry, points):
        """
        Run from the entry function and collect one result per point

        Returns:
            PointResult list in call-site order
        """
        self.points = {point.call_site: point for point in points}
        self.results = {site: PointResult(point) for site, point in self.points.items()}
        self._reached = set()
        self._point_warnings = {site: [] for site in self.points}
        start = _TaintState()
        entry_block = self.cfg.block_for_label(entry)
        if entry_block is None:
            raise NotFound(f"entry function '{entry}' is not a block label")
        for reg in self.sources.registers:
            start.define(reg, True, (entry_block.id, -1))
        self._analyze_function(entry, start, 0)
        for site, result in self.results.items():
            if site not in self._reached:
                result.warnings.append("Unreached")
            for found in self._point_warnings[site]:
                result.warnings.extend(found)
            result.tainted_args = sorted(set(result.tainted_args), key=ARGUMENT_REGISTERS.index)
            result.warnings = sorted(set(result.warnings))
        return [self.results[site] for site in sorted(self.results)]

    def _analyze_function(self, label, entry_state, depth):
        key = (label, depth, entry_state.key())
        if key in self._memo:
            return self._memo[key]
        blocks = self.cfg.function_blocks(label)
        in_states = {self.cfg.block_for_label(label).id: entry_state}
        worklist = [self.cfg.block_for_label(label).id]
        warnings = set()
        exits = {}
        max_iterations = (len(blocks) + 1) * 64
        iterations = 0
        self._active.append(label)
        while worklist and iterations < max_iterations:
            iterations += 1
            block_id = worklist.pop(0)
            out = self._transfer_block(self.cfg.block(block_id), in_states[block_id].copy(), depth, warnings)
            successors = self.cfg.successors(block_id)
            if self.cfg.block(block_id).terminator.kind is TerminatorKind.RET or not successors:
                exits[block_id] = out
            for succ in successors:
                previous = in_states.get(succ)
                merged = out if previous is None else previous.join(out)
                if previous is None or merged != previous:
                    in_states[succ] = merged
                    if succ not in worklist:
                        worklist.append(succ)
        self._active.pop()
        if worklist:
            logger.warning("taint analysis of %s hit its iteration cap", label)
        states = [exits[block_id] for block_id in sorted(exits)]
        exit_state = states[0] if states else entry_state.copy()
        for state in states[1:]:
            exit_state = exit_state.join(state)
        result = _FunctionResult(exit_state, warnings)
        self._memo[key] = result
        return result

    def _transfer_block(self, block, state, depth, warnings):
        for index, instr in enumerate(block.instructions):
            site = (block.id, index)
            if instr.is_control:
                if instr.mnemonic == "call" or (instr.mnemonic == "jmp" and block.terminator.target
                                                and self.cfg.successor(block.id, "jump") is None):
                    self._transfer_call(block, instr, state, depth, site, warnings)
                continue
            self._transfer(instr, state, depth, site)
        return state

    def _subject(self, mem, state, depth):
        """canonical subject of a memory operand, None when unknown"""
        if mem.symbol and mem.base is None and mem.index is None:
            return ("global", mem.symbol)
        if mem.index is not None or mem.base is None:
            return None
        base = mem.base.parent
        if base == "rsp":
            if state.rsp is None:
                return None
            return ("stack", depth, state.rsp + mem.disp)
        pointee = state.pointers.get(base)
        if pointee is None:
            return None
        if pointee[0] == "stack":
            return ("stack", pointee[1], pointee[2] + mem.disp)
        return pointee

    def _address_tainted(self, mem, state):
        return any(reg.parent in state.tainted for reg in mem.registers())

    def _value_tainted(self, op, state, depth):
        if isinstance(op, Imm):
            return False
        if isinstance(op, Reg):
            return op.register.parent in state.tainted
        subject = self._subject(op, state, depth)
        return (subject is not None and subject in state.tainted) or self._address_tainted(op, state)

    def _write(self, op, tainted, state, depth, site):
        if isinstance(op, Reg):
            reg = op.register.parent
            state.pointers.pop(reg, None)
            if reg == "rsp":
                state.rsp = None
            state.define(reg, tainted, site)
            return
        subject = self._subject(op, state, depth)
        if subject is not None:
            state.define(subject, tainted, site)

    def _transfer(self, instr, state, depth, site):
        m = instr.mnemonic
        ops = instr.operands
        if m in ("mov", "movabs"):
            src, dst = ops
            tainted = self._value_tainted(src, state, depth)
            pointee = None
            if isinstance(src, Reg) and src.register.width == 64:
                reg = src.register.parent
                if reg == "rsp" and state.rsp is not None:
                    pointee = ("stack", depth, state.rsp)
                else:
                    pointee = state.pointers.get(reg)
            if isinstance(dst, Reg) and dst.register.parent == "rsp":
                target = pointee if pointee and pointee[0] == "stack" and pointee[1] == depth else None
                state.define("rsp", tainted, site)
                state.rsp = target[2] if target else None
                return
            self._write(dst, tainted, state, depth, site)
            if pointee is not None and isinstance(dst, Reg):
                state.pointers[dst.register.parent] = pointee
        elif m == "lea":
            src, dst = ops
            subject = self._subject(src, state, depth)
            if src.symbol and src.base is None and src.index is None:
                subject = ("global", src.symbol)
            tainted = self._address_tainted(src, state)
            if dst.register.parent == "rsp":
                state.rsp = subject[2] if subject and subject[0] == "stack" and subject[1] == depth else None
                state.define("rsp", tainted, site)
                return
            self._write(dst, tainted, state, depth, site)
            if subject is not None:
                state.pointers[dst.register.parent] = subject
        elif m in BINARY_ALU:
            src, dst = ops
            if m in ("xor", "sub") and instr.shape == "rr" and src.register == dst.register:
                tainted = False
            else:
                tainted = self._value_tainted(src, state, depth) or self._value_tainted(dst, state, depth)
            if isinstance(dst, Reg) and dst.register.parent == "rsp" and m in ("add", "sub") and isinstance(src, Imm):
                if state.rsp is not None:
                    state.rsp += src.value if m == "add" else -src.value
                return
            pointee = state.pointers.get(dst.register.parent) if isinstance(dst, Reg) else None
            self._write(dst, tainted, state, depth, site)
            if pointee is not None and m in ("add", "sub") and isinstance(src, Imm) and pointee[0] == "stack":
                step = src.value if m == "add" else -src.value
                state.pointers[dst.register.parent] = (pointee[0], pointee[1], pointee[2] + step)
        elif m in UNARY_ALU or m in SHIFTS:
            dst = ops[-1]
            tainted = self._value_tainted(dst, state, depth)
            if m in SHIFTS and len(ops) == 2 and isinstance(ops[0], Reg):
                tainted = tainted or "rcx" in state.tainted
            self._write(dst, tainted, state, depth, site)
        elif m == "push":
            tainted = self._value_tainted(ops[0], state, depth)
            if state.rsp is not None:
                state.rsp -= 8
                state.define(("stack", depth, state.rsp), tainted, site)
        elif m == "pop":
            tainted = False
            if state.rsp is not None:
                tainted = ("stack", depth, state.rsp) in state.tainted
                state.rsp += 8
            self._write(ops[0], tainted, state, depth, site)

    def _pointee_tainted(self, reg, state):
        return reg in state.tainted or state.pointers.get(reg) in state.tainted

    def _taint_pointee(self, reg, state, site):
        pointee = state.pointers.get(reg)
        if pointee is not None:
            state.define(pointee, True, site)

    def _observe(self, site, callee, state, warnings):
        if site not in self.points:
            return
        self._reached.add(site)
        self._point_warnings[site].append(warnings)
        result = self.results[site]
        examined, pointee_args = CALLEE_ARGS.get(callee, (ARGUMENT_REGISTERS, ARGUMENT_REGISTERS))
        for reg in examined:
            tainted = reg in state.tainted or (reg in pointee_args and self._pointee_tainted(reg, state))
            if callee == "gets":
                tainted = True
            if tainted:
                result.tainted_args.append(reg)
        reaching = {(d.site, d.subject) for d in result.reaching}
        for reg in examined:
            for def_site in sorted(state.defs.get(reg, ())):
                if (def_site, reg) not in reaching:
                    result.reaching.append(Definition(def_site, reg, reg in state.tainted))

    def _transfer_call(self, block, instr, state, depth, site, warnings):
        if instr.is_indirect:
            self._clobber(state, site)
            state.define("rax", True, site)
            return
        target = instr.target
        callee_block = self.cfg.block_for_label(target)
        if callee_block is None:
            self._external_call(callee_name(target), state, site, warnings)
            return
        if depth + 1 > self.depth_limit or target in self._active:
            warning = f"RecursionLimit({target})"
            logger.warning("%s at block %s", warning, block.label)
            warnings.add(warning)
            self._clobber(state, site)
            state.define("rax", True, site)
            for symbol in self._globals:
                state.define(("global", symbol), True, site)
            return
        child_entry = _TaintState(
            tainted={s for s in state.tainted if not isinstance(s, str) or s in ARGUMENT_REGISTERS},
            defs=state.defs,
            pointers={reg: p for reg, p in state.pointers.items() if reg in ARGUMENT_REGISTERS},
            rsp=0,
        )
        child = self._analyze_function(target, child_entry, depth + 1)
        warnings.update(child.warnings)
        exit_state = child.exit_state
        self._clobber(state, site)
        state.define("rax", "rax" in exit_state.tainted, site)
        # child frame slots do not outlive the return
        caller_memory = {s for s in state.tainted if isinstance(s, tuple)}
        returned = {s for s in exit_state.tainted
                    if isinstance(s, tuple) and not (s[0] == "stack" and s[1] > depth)}
        state.tainted = (state.tainted - caller_memory) | returned

    def _external_call(self, callee, state, site, warnings):
        self._observe(site, callee, state, warnings)
        if callee in self.sources.input_callees or callee == "gets":
            buffer = INPUT_BUFFERS.get(callee)
            if buffer:
                self._taint_pointee(buffer, state, site)
            tainted_rax = True
        elif callee in COPY_CALLEES:
            dest, source = COPY_CALLEES[callee]
            if source in state.tainted or self._pointee_tainted(source, state):
                self._taint_pointee(dest, state, site)
            tainted_rax = dest in state.tainted
        elif callee in KNOWN_CLEAN:
            tainted_rax = False
        else:
            tainted_rax = True
        self._clobber(state, site)
        state.define("rax", tainted_rax, site)

    def _clobber(self, state, site):
        for reg in CALLER_SAVED:
            state.pointers.pop(reg, None)
            if reg != "rax":
                state.define(reg, False, site)


def observation_points(cfg, callees=None):
    """
    One point per direct call that leaves the program

    Args:
        cfg: Cfg
        callees: restrict to these callee names; None keeps every library call

    Returns:
        ObservationPoint list in block order
    """
    points = []
    for block in cfg.blocks:
        term = block.terminator
        if term.kind is not TerminatorKind.CALL or term.indirect:
            continue
        if cfg.block_for_label(term.target) is not None:
            continue
        name = callee_name(term.target)
        if callees is not None and name not in callees:
            continue
        examined, _ = CALLEE_ARGS.get(name, (ARGUMENT_REGISTERS, ()))
        points.append(ObservationPoint((block.id, len(block.instructions) - 1), name, examined, block.label))
    return points


def analyze_reaching_definitions(cfg, entry, points=None, sources=None, depth_limit=DEFAULT_DEPTH_LIMIT):
    """
    Taint of the examined argument registers at each observation point

    Args:
        cfg: Cfg
        entry: label of the entry function
        points: ObservationPoint list, every library call when omitted
        sources: TaintSources
        depth_limit: child analysis depth bound

    Returns:
        PointResult list
    """
    if points is None:
        points = observation_points(cfg)
    analyzer = TaintAnalyzer(cfg, sources, depth_limit)
    results = analyzer.analyze(entry, points)
    tainted = sum(1 for result in results if result.tainted_args)
    logger.info("taint analysis: %d observation points, %d with tainted arguments", len(results), tainted)
    return results


def select_type_m(results, risky=DEFAULT_RISKY_CALLEES):
    """
    Blocks whose risky callee receives a tainted argument

    Marks the selected results in place.

    Returns:
        sorted block ids
    """
    risky = set(risky)
    selected = set()
    for result in results:
        result.selected = result.point.callee in risky and bool(result.tainted_args)
        if result.selected:
            selected.add(result.block_id)
    return sorted(selected)


def describe(result):
    """one-line summary used in logs and the CLI text output"""
    args = ",".join(result.tainted_args) or "-"
    return f"{result.point.block_label}: {result.point.callee}({args}){' selected' if result.selected else ''}"

