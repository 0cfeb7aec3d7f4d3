"""Decomposable probabilistic circuits: validation, evaluation, HMM unrolling.

A circuit is a DAG of input, product and sum nodes stored in topological
order (children strictly before parents, root last).  Scopes are bit vectors
over the variables, so disjointness and equality checks are single integer
operations.  Evaluation is one array pass over the node list with all
arithmetic in log space; sum nodes use max-shifted log-sum-exp.

Graphs are immutable after construction and safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .errors import MalformedCircuitError
from .hmm import HmmParams, VirtualEvidence
from .numerics import NEG_INF, logsumexp

CIRCUIT_MAGIC = b"CODDPC01"

_KIND_INPUT = 0
_KIND_PRODUCT = 1
_KIND_SUM = 2

_WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class InputNode:
    """Categorical leaf over one variable; log_params has vocab-size entries."""

    var: int
    log_params: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.log_params, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "log_params", arr)


@dataclass(frozen=True)
class ProductNode:
    children: tuple[int, ...]


@dataclass(frozen=True)
class SumNode:
    children: tuple[int, ...]
    log_weights: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.log_weights, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "log_weights", arr)


CircuitNode = InputNode | ProductNode | SumNode


@dataclass
class CircuitGraph:
    """Node list in topological order; the root is the final node."""

    nodes: list[CircuitNode]
    num_vars: int
    vocab: int
    root: int = -1
    _scopes: list[int] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.nodes:
            raise MalformedCircuitError("a circuit needs at least one node")
        if self.root == -1:
            self.root = len(self.nodes) - 1
        if not 0 <= self.root < len(self.nodes):
            raise MalformedCircuitError(f"root id {self.root} out of range")
        self._check_wellformed()

    def _check_wellformed(self) -> None:
        for idx, node in enumerate(self.nodes):
            if isinstance(node, InputNode):
                if not 0 <= node.var < self.num_vars:
                    raise MalformedCircuitError(
                        f"node {idx}: variable index {node.var} out of range"
                    )
                if node.log_params.shape != (self.vocab,):
                    raise MalformedCircuitError(
                        f"node {idx}: expected {self.vocab} log-params, "
                        f"got {node.log_params.shape}"
                    )
                continue
            if not node.children:
                raise MalformedCircuitError(f"node {idx}: inner node without children")
            for child in node.children:
                if not 0 <= child < idx:
                    raise MalformedCircuitError(
                        f"node {idx}: child id {child} violates topological order"
                    )
            if isinstance(node, SumNode) and len(node.log_weights) != len(node.children):
                raise MalformedCircuitError(
                    f"node {idx}: {len(node.children)} children but "
                    f"{len(node.log_weights)} weights"
                )

    def scopes(self) -> list[int]:
        """Per-node variable scope as a bit vector over num_vars."""
        if self._scopes is None:
            scopes: list[int] = []
            for node in self.nodes:
                if isinstance(node, InputNode):
                    scopes.append(1 << node.var)
                else:
                    acc = 0
                    for child in node.children:
                        acc |= scopes[child]
                    scopes.append(acc)
            self._scopes = scopes
        return self._scopes

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Violation:
    kind: str
    node: int
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def validate_structure(graph: CircuitGraph) -> ValidationReport:
    """Check the properties needed for tractable virtual-evidence queries.

    Malformed graphs (dangling ids, order violations) raise
    MalformedCircuitError at construction; this reports property violations:
    decomposability, smoothness, root scope coverage, weight normalization,
    and reachability from the root.
    """
    scopes = graph.scopes()
    out: list[Violation] = []

    for idx, node in enumerate(graph.nodes):
        if isinstance(node, InputNode):
            total = np.exp(logsumexp(node.log_params))
            if abs(total - 1.0) > _WEIGHT_TOL:
                out.append(Violation(
                    "weight-normalization", idx,
                    f"input log-params sum to {total!r}"))
        elif isinstance(node, ProductNode):
            seen = 0
            for child in node.children:
                if seen & scopes[child]:
                    out.append(Violation(
                        "decomposability", idx,
                        "product children share scope variables"))
                    break
                seen |= scopes[child]
        else:
            total = np.exp(logsumexp(node.log_weights))
            if abs(total - 1.0) > _WEIGHT_TOL:
                out.append(Violation(
                    "weight-normalization", idx,
                    f"sum log-weights sum to {total!r}"))
            first = scopes[node.children[0]]
            if any(scopes[c] != first for c in node.children[1:]):
                out.append(Violation(
                    "smoothness", idx, "sum children have differing scopes"))

    full = (1 << graph.num_vars) - 1
    if scopes[graph.root] != full:
        missing = [v for v in range(graph.num_vars)
                   if not scopes[graph.root] >> v & 1]
        out.append(Violation(
            "scope-coverage", graph.root,
            f"root scope misses variables {missing}"))

    reachable = [False] * len(graph.nodes)
    reachable[graph.root] = True
    for idx in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[idx]
        if reachable[idx] and not isinstance(node, InputNode):
            for child in node.children:
                reachable[child] = True
    for idx, ok in enumerate(reachable):
        if not ok:
            out.append(Violation("reachability", idx, "node unreachable from root"))

    return ValidationReport(out)


def _upward_pass(graph: CircuitGraph, leaf_values) -> float:
    """One bottom-up pass; leaf_values maps an InputNode to its log value."""
    vals = np.empty(len(graph.nodes))
    for idx, node in enumerate(graph.nodes):
        if isinstance(node, InputNode):
            vals[idx] = leaf_values(node)
        elif isinstance(node, ProductNode):
            vals[idx] = sum(vals[c] for c in node.children)
        else:
            child_vals = vals[list(node.children)] + node.log_weights
            vals[idx] = logsumexp(child_vals)
    return float(vals[graph.root])


def evaluate_log_likelihood(graph: CircuitGraph, assignment: np.ndarray) -> float:
    """log p(x) for a full assignment, one bottom-up pass."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (graph.num_vars,):
        raise ValueError(
            f"assignment must cover all {graph.num_vars} variables")
    if np.any(assignment < 0) or np.any(assignment >= graph.vocab):
        raise ValueError("token id out of vocabulary range")
    return _upward_pass(graph, lambda node: node.log_params[assignment[node.var]])


def circuit_log_partition(graph: CircuitGraph, evidence: VirtualEvidence) -> float:
    """Expected product of virtual-evidence weights under the circuit.

    At each leaf the weight row is folded into the local expectation
    log sum_v exp(log_params[v] + w[v]); the rest is the ordinary upward pass.
    """
    if evidence.length != graph.num_vars or evidence.vocab != graph.vocab:
        raise ValueError("evidence shape does not match the circuit")
    log_w = evidence.log_w

    def leaf(node: InputNode) -> float:
        return logsumexp(node.log_params + log_w[node.var])

    return _upward_pass(graph, leaf)


def build_hmm_circuit(num_states: int, vocab: int, length: int,
                      params: HmmParams) -> CircuitGraph:
    """Unroll a homogeneous chain of the given length into a circuit.

    The construction is right-to-left: per (position, state) a leaf carries
    the emission row, a sum node mixes the next position's sub-circuits with
    transition weights, and a product joins the two.  The root mixes the
    position-0 sub-circuits with the initial distribution.  The result is
    smooth and decomposable by construction and encodes exactly the chain
    joint.  A single hidden state collapses to one product of independent
    leaves.
    """
    if num_states < 1 or vocab < 2 or length < 1:
        raise ValueError("need N >= 1, V >= 2, L >= 1")
    if params.num_states != num_states or params.vocab != vocab:
        raise ValueError(
            f"parameter dimensions ({params.num_states}, {params.vocab}) do not "
            f"match requested ({num_states}, {vocab})")

    nodes: list[CircuitNode] = []

    if num_states == 1:
        for pos in range(length):
            nodes.append(InputNode(pos, params.log_B[0]))
        nodes.append(ProductNode(tuple(range(length))))
        return CircuitGraph(nodes, num_vars=length, vocab=vocab)

    # ids of the sub-circuit "suffix from position i given state h"
    suffix = [0] * num_states
    for state in range(num_states):
        nodes.append(InputNode(length - 1, params.log_B[state]))
        suffix[state] = len(nodes) - 1
    for pos in range(length - 2, -1, -1):
        nxt = [0] * num_states
        children = tuple(suffix)
        for state in range(num_states):
            nodes.append(SumNode(children, params.log_A[state]))
            mix = len(nodes) - 1
            nodes.append(InputNode(pos, params.log_B[state]))
            nodes.append(ProductNode((len(nodes) - 1, mix)))
            nxt[state] = len(nodes) - 1
        suffix = nxt
    nodes.append(SumNode(tuple(suffix), params.log_pi))
    return CircuitGraph(nodes, num_vars=length, vocab=vocab)


def circuit_to_bytes(graph: CircuitGraph) -> bytes:
    """Serialize to the CODDPC01 container.  The root must be the last node."""
    if graph.root != len(graph.nodes) - 1:
        raise ValueError("serialization requires the root to be the final node")
    out = bytearray(CIRCUIT_MAGIC)
    out += binio.u32_bytes(graph.num_vars, graph.vocab, len(graph.nodes))
    for node in graph.nodes:
        if isinstance(node, InputNode):
            out.append(_KIND_INPUT)
            out += binio.u32_bytes(node.var)
            out += binio.f64_bytes(node.log_params)
        elif isinstance(node, ProductNode):
            out.append(_KIND_PRODUCT)
            out += binio.u32_bytes(len(node.children), *node.children)
        else:
            out.append(_KIND_SUM)
            out += binio.u32_bytes(len(node.children), *node.children)
            out += binio.f64_bytes(node.log_weights)
    return bytes(out)


def circuit_from_bytes(data: bytes) -> CircuitGraph:
    cur = binio.Cursor(data)
    cur.magic(CIRCUIT_MAGIC)
    num_vars = cur.u32("variable count")
    vocab = cur.u32("vocab size")
    count = cur.u32("node count")
    nodes: list[CircuitNode] = []
    for idx in range(count):
        kind = cur.u8(f"node {idx} kind")
        if kind == _KIND_INPUT:
            var = cur.u32(f"node {idx} variable")
            nodes.append(InputNode(var, cur.f64_array(vocab, f"node {idx} params")))
        elif kind == _KIND_PRODUCT:
            n_children = cur.u32(f"node {idx} child count")
            children = tuple(int(c) for c in cur.u32_array(n_children, f"node {idx} children"))
            nodes.append(ProductNode(children))
        elif kind == _KIND_SUM:
            n_children = cur.u32(f"node {idx} child count")
            children = tuple(int(c) for c in cur.u32_array(n_children, f"node {idx} children"))
            weights = cur.f64_array(n_children, f"node {idx} weights")
            nodes.append(SumNode(children, weights))
        else:
            raise binio.FormatError(f"unknown node kind {kind}", offset=cur.offset - 1)
    cur.expect_end()
    return CircuitGraph(nodes, num_vars=num_vars, vocab=vocab)


def save_circuit(graph: CircuitGraph, path: str | Path) -> None:
    Path(path).write_bytes(circuit_to_bytes(graph))


def load_circuit(path: str | Path) -> CircuitGraph:
    return circuit_from_bytes(Path(path).read_bytes())
