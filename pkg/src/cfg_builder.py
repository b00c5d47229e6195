#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CFG Builder Module
Partitions a Program into maximal basic blocks and links them into a
control-flow graph.
"""

import logging

import networkx as nx

from errors import NotFound, UnknownEntry
from models.basic_block import BasicBlock, Terminator, TerminatorKind
from models.instruction import Label, LabelLine, OpaqueLine

logger = logging.getLogger(__name__)

# directives after which the next line is not reached by falling through
SECTION_DIRECTIVES = (".text", ".data", ".bss", ".section", ".rodata", ".previous", ".pushsection", ".popsection")
DATA_DIRECTIVES = (
    ".string", ".asciz", ".ascii", ".byte", ".word", ".short", ".value", ".long",
    ".int", ".quad", ".octa", ".zero", ".skip", ".space", ".fill",
)

INTRA_EDGE_KINDS = ("taken", "fallthrough", "jump")


def _is_boundary(text):
    word = text.strip().split(None, 1)[0].lower() if text.strip() else ""
    return word in SECTION_DIRECTIVES or word in DATA_DIRECTIVES


class _PendingBlock:
    """mutable accumulator used while partitioning"""

    def __init__(self, labels, start_line, contiguous, reachable):
        self.labels = list(labels)
        self.start_line = start_line
        self.end_line = start_line
        self.contiguous = contiguous
        self.reachable = reachable
        self.instructions = []
        self.interior = []
        self.opaque = 0
        self.clean_start = 0
        self.exit = None


class Cfg:
    def __init__(self, program, blocks, graph, entry, external_edges):
        """
        Control-flow graph over the blocks of one program

        Args:
            program: the Program the blocks were cut from
            blocks: BasicBlock tuple indexed by id
            graph: networkx MultiDiGraph with a 'kind' attribute per edge
            entry: id of the entry block
            external_edges: (from id, symbol, kind) triples leaving the program
        """
        self.program = program
        self.blocks = tuple(blocks)
        self.graph = graph
        self.entry = entry
        self.external_edges = tuple(external_edges)
        self._by_label = {}
        for block in self.blocks:
            for label in block.labels:
                self._by_label[label] = block
            self._by_label.setdefault(block.label, block)

    def block(self, block_id):
        return self.blocks[block_id]

    def block_for_label(self, label):
        return self._by_label.get(label)

    def edges(self):
        """sorted (from, to, kind) triples of internal edges"""
        return sorted((u, v, data["kind"]) for u, v, data in self.graph.edges(data=True))

    def successors(self, block_id, kinds=INTRA_EDGE_KINDS):
        return sorted({v for _, v, data in self.graph.out_edges(block_id, data=True) if data["kind"] in kinds})

    def successor(self, block_id, kind):
        for _, v, data in self.graph.out_edges(block_id, data=True):
            if data["kind"] == kind:
                return v
        return None

    def reachable(self):
        """ids reachable from the entry block over every edge kind"""
        return {self.entry} | nx.descendants(self.graph, self.entry)

    def function_blocks(self, label):
        """blocks of the function starting at label, following intra-procedural edges"""
        start = self.block_for_label(label)
        if start is None:
            raise NotFound(f"function '{label}' is not a block label")
        view = nx.subgraph_view(self.graph, filter_edge=lambda u, v, k: self.graph.edges[u, v, k]["kind"] != "call")
        return sorted({start.id} | nx.descendants(view, start.id))

    def is_isomorphic_to(self, other):
        """same node count and same edge relation under the identity mapping"""
        return len(self.blocks) == len(other.blocks) and self.edges() == other.edges()

    def to_dict(self):
        """Convert graph to dictionary for JSON output"""
        return {
            "entry": self.entry,
            "nodes": [block.to_dict() for block in self.blocks],
            "edges": [{"from": u, "to": v, "kind": kind} for u, v, kind in self.edges()],
            "external": [
                {"from": u, "symbol": symbol, "kind": kind}
                for u, symbol, kind in sorted(self.external_edges)
            ],
        }


def _terminator_for(instr):
    m = instr.mnemonic
    if m == "ret":
        return TerminatorKind.RET
    if m == "jmp":
        return TerminatorKind.JMP
    if m == "call":
        return TerminatorKind.CALL
    return TerminatorKind.COND_JMP


def _partition(program, targets):
    """cut the program's lines into pending blocks"""
    pending = []
    current = None
    waiting_labels = []
    boundary = False
    after_transfer = False

    def close():
        nonlocal current
        if current is not None:
            pending.append(current)
        current = None

    for index, line in enumerate(program.lines):
        if isinstance(line, LabelLine):
            if current is None or line.name in targets:
                close()
                waiting_labels.append(line.name)
            else:
                current.interior.append((line.name, len(current.instructions)))
            continue
        if isinstance(line, OpaqueLine):
            if line.kind == "directive" and _is_boundary(line.text):
                close()
                waiting_labels = []
                boundary = True
                after_transfer = False
                continue
            if line.kind != "instruction":
                continue
        if current is None:
            reachable = bool(waiting_labels) or not after_transfer
            current = _PendingBlock(waiting_labels, index, not boundary, reachable)
            waiting_labels = []
            boundary = False
        current.end_line = index
        if isinstance(line, OpaqueLine):
            current.opaque += 1
            current.clean_start = len(current.instructions)
            continue
        current.instructions.append(line)
        if line.is_control:
            current.exit = line
            after_transfer = line.mnemonic in ("ret", "jmp")
            close()
        else:
            after_transfer = False
    close()
    return pending


def build_cfg(program, entry):
    """
    Build the control-flow graph of a program

    Args:
        program: parsed Program
        entry: symbol of the entry block

    Returns:
        Cfg

    Raises:
        UnknownEntry: entry is not a label of the program
    """
    if entry not in program.symbols:
        raise UnknownEntry(entry)
    targets = {entry}
    for instr in program.instructions():
        for op in instr.operands:
            if isinstance(op, Label):
                targets.add(op.symbol)

    pending = _partition(program, targets)
    blocks = []
    for block_id, item in enumerate(pending):
        next_id = block_id + 1
        falls_into = next_id if next_id < len(pending) and pending[next_id].contiguous else None
        exit_instr = item.exit
        if exit_instr is None:
            terminator = Terminator(TerminatorKind.FALLTHROUGH, fallthrough=falls_into)
        else:
            kind = _terminator_for(exit_instr)
            terminator = Terminator(
                kind,
                target=exit_instr.target,
                fallthrough=falls_into if kind in (TerminatorKind.COND_JMP, TerminatorKind.CALL) else None,
                condition=exit_instr.mnemonic if kind is TerminatorKind.COND_JMP else None,
                indirect=kind in (TerminatorKind.JMP, TerminatorKind.CALL) and exit_instr.is_indirect,
            )
        count = len(item.instructions)
        blocks.append(BasicBlock(
            id=block_id,
            label=item.labels[0] if item.labels else f".B{block_id}",
            instructions=tuple(item.instructions),
            terminator=terminator,
            labels=tuple(item.labels),
            interior_labels=tuple((name, at) for name, at in item.interior if at < count),
            span=(item.start_line, item.end_line),
            diversifiable=item.opaque == 0 and count > 0 and not terminator.indirect,
            selectable=item.reachable and count > 0,
            clean_start=item.clean_start,
        ))

    label_to_id = {}
    for block in blocks:
        for label in block.labels:
            label_to_id[label] = block.id

    graph = nx.MultiDiGraph()
    graph.add_nodes_from(block.id for block in blocks)
    external = []
    for block in blocks:
        term = block.terminator
        if term.indirect:
            external.append((block.id, "*indirect", term.kind.value.lower()))
        elif term.target is not None:
            kind = {"Jmp": "jump", "CondJmp": "taken", "Call": "call"}[term.kind.value]
            if term.target in label_to_id:
                graph.add_edge(block.id, label_to_id[term.target], kind=kind)
            else:
                if program.is_external(term.target):
                    logger.debug("branch target '%s' is external", term.target)
                external.append((block.id, term.target, kind))
        if term.fallthrough is not None:
            graph.add_edge(block.id, term.fallthrough, kind="fallthrough")

    if entry not in label_to_id:
        raise UnknownEntry(entry)
    cfg = Cfg(program, blocks, graph, label_to_id[entry], external)
    logger.info("built CFG: %d blocks, %d edges, %d external", len(blocks), graph.number_of_edges(), len(external))
    return cfg


def block_at(cfg, symbol):
    """
    Resolve a label to the block that starts at or contains it

    Returns:
        (BasicBlock, "exact" | "interior")

    Raises:
        NotFound: symbol is external or labels no instruction
    """
    block = cfg.block_for_label(symbol)
    if block is not None:
        return block, "exact"
    for candidate in cfg.blocks:
        if candidate.interior_index(symbol) is not None:
            return candidate, "interior"
    raise NotFound(f"'{symbol}' does not resolve to a block")
