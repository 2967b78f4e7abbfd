"""Semantic fusion: turning max-then-shifted-sum reductions into one pass.

The matcher looks for

    m  = reduce_max(x) over R
    mb = broadcast(m) over R
    e  = E(sub(x, mb))            (E is the algebra's homomorphism)
    s  = reduce_sum(e) over R

and replaces ``m`` and ``s`` by a single ONLINE node carrying ``(max, sum)``
state.  Contractions over R of the normalised ``e / broadcast(s)`` against a
weight tensor are then absorbed into the same node as extra accumulators,
with the division moved after the reduction (⊗ distributes over ⊕ and the
divisor is constant along R).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .algebra import SOFTMAX, AlgebraReport, ReductionAlgebra, check_algebra
from .ir import (
    Call,
    OpKind,
    OpNode,
    Ref,
    TensorGraph,
    TensorRef,
    eliminate_dead,
    rename_refs,
)

DEFAULT_SAMPLES = tuple(np.linspace(-20.0, 20.0, 17)) + (-1.0, 0.0, 0.5, 3.0)


@dataclass(frozen=True)
class TwoPassReductionPattern:
    stat: OpNode
    broadcast: OpNode
    shift: OpNode | None
    hom: OpNode
    fold: OpNode

    @property
    def score(self) -> str:
        return self.stat.inputs[0]

    @property
    def dims(self) -> tuple[str, ...]:
        return self.stat.dims


@dataclass(frozen=True)
class SemanticDiagnostic:
    node: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: {self.message}"


@dataclass
class SemanticResult:
    graph: TensorGraph
    rewrites: list[tuple[TwoPassReductionPattern, str]] = field(default_factory=list)
    diagnostics: list[SemanticDiagnostic] = field(default_factory=list)

    @property
    def fired(self) -> bool:
        return bool(self.rewrites)


class RewriteDeclined(ValueError):
    def __init__(self, diagnostic: SemanticDiagnostic):
        super().__init__(str(diagnostic))
        self.diagnostic = diagnostic


def _downstream(graph: TensorGraph, value: str) -> set[str]:
    """Values reachable from ``value`` through pointwise/broadcast nodes."""
    seen = {value}
    stack = [value]
    while stack:
        v = stack.pop()
        for node in graph.consumers(v):
            if node.kind in (OpKind.POINTWISE, OpKind.BROADCAST):
                for ref in node.outputs:
                    if ref.name not in seen:
                        seen.add(ref.name)
                        stack.append(ref.name)
    return seen


def _sub_operands(graph: TensorGraph, expr) -> tuple[OpNode | None, str, str] | None:
    """Resolve ``expr`` to ``sub(a, b)``; returns (shift node or None, a, b)."""
    if isinstance(expr, Call) and expr.op == "sub" and all(isinstance(a, Ref) for a in expr.args):
        return None, expr.args[0].name, expr.args[1].name
    if isinstance(expr, Ref):
        node = graph.producer(expr.name)
        fn = node.fn
        if node.kind is OpKind.POINTWISE and isinstance(fn, Call) and fn.op == "sub" and all(isinstance(a, Ref) for a in fn.args):
            return node, fn.args[0].name, fn.args[1].name
    return None


def find_two_pass_patterns(graph: TensorGraph, alg: ReductionAlgebra = SOFTMAX):
    """All matches in ``graph`` plus diagnostics for near-misses."""
    patterns: list[TwoPassReductionPattern] = []
    diags: list[SemanticDiagnostic] = []
    for stat in graph.nodes:
        if stat.kind is not OpKind.REDUCE or stat.combiner != alg.stat_combiner:
            continue
        reach = _downstream(graph, stat.out.name)
        folds = [
            n for n in graph.nodes
            if n.kind is OpKind.REDUCE and n.combiner == alg.oplus_combiner
            and set(n.dims) == set(stat.dims) and n.inputs[0] in reach
        ]
        for fold in folds:
            hom = graph.producer(fold.inputs[0])
            matched = None
            if hom.kind is OpKind.POINTWISE and isinstance(hom.fn, Call) and hom.fn.op == alg.hom_op:
                matched = _sub_operands(graph, hom.fn.args[0])
            if matched is None:
                diags.append(SemanticDiagnostic(
                    fold.id, f"non-homomorphic dependency: {fold.inputs[0]!r} is not {alg.hom_op}(x - max)"))
                continue
            shift, a, b = matched
            bnode = graph.producer(b)
            if not (bnode.kind is OpKind.BROADCAST and bnode.inputs[0] == stat.out.name and set(bnode.dims) == set(stat.dims)):
                diags.append(SemanticDiagnostic(
                    fold.id, f"non-homomorphic dependency: {b!r} is not the broadcast max of {stat.id!r}"))
                continue
            if a != stat.inputs[0]:
                diags.append(SemanticDiagnostic(
                    fold.id, f"dependency mismatch: shifts {a!r} by the max of {stat.inputs[0]!r}"))
                continue
            patterns.append(TwoPassReductionPattern(stat, bnode, shift, hom, fold))
            break
    return patterns, diags


def _rename_inputs(node: OpNode, mapping: dict[str, str]) -> OpNode:
    if not any(v in mapping for v in node.inputs):
        return node
    inputs = tuple(dict.fromkeys(mapping.get(v, v) for v in node.inputs))
    fn = rename_refs(node.fn, mapping) if node.fn is not None else None
    return replace(node, inputs=inputs, fn=fn)


def _ancestors(graph: TensorGraph, value: str) -> set[str]:
    seen: set[str] = set()
    stack = [value]
    while stack:
        v = stack.pop()
        node = graph.producer(v)
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.extend(node.inputs)
    return seen


def rewrite_two_pass_to_online(
    graph: TensorGraph,
    pattern: TwoPassReductionPattern,
    alg: ReductionAlgebra = SOFTMAX,
    report: AlgebraReport | None = None,
) -> tuple[TensorGraph, str]:
    """Replace a matched max/sum pair by one ONLINE node; returns (graph, node id).

    Raises :class:`RewriteDeclined` when the algebra fails its axiom check or
    the match does not go through the algebra's homomorphism.
    """
    report = report or check_algebra(alg, DEFAULT_SAMPLES)
    if not report.ok:
        failed = ", ".join(r.name for r in report.results if not r.passed)
        raise RewriteDeclined(SemanticDiagnostic(pattern.fold.id, f"algebra {alg.name!r} failed: {failed}"))
    hom = pattern.hom
    if not (isinstance(hom.fn, Call) and hom.fn.op == alg.hom_op):
        raise RewriteDeclined(SemanticDiagnostic(pattern.fold.id, "non-homomorphic dependency"))

    stat, fold = pattern.stat, pattern.fold
    oid = f"{stat.id}_online"
    max_ref = TensorRef(f"{oid}.max", stat.out.dims, stat.out.dtype)
    sum_ref = TensorRef(f"{oid}.sum", fold.out.dims, fold.out.dtype)
    online = OpNode(oid, OpKind.ONLINE, (pattern.score,), (max_ref, sum_ref), dims=stat.dims, algebra=alg.name)
    mapping = {stat.out.name: max_ref.name, fold.out.name: sum_ref.name}
    nodes = []
    for n in graph.nodes:
        if n.id == stat.id:
            nodes.append(online)
        elif n.id != fold.id:
            nodes.append(_rename_inputs(n, mapping))
    g = graph.with_nodes(nodes)
    g = _absorb_weighted_sums(g, oid, hom.out.name)
    g = eliminate_dead(g)
    return g.with_nodes(g.topological()), oid


def _absorb_weighted_sums(graph: TensorGraph, oid: str, numer: str) -> TensorGraph:
    online = graph.node(oid)
    red = set(online.dims)
    sum_name = online.outputs[1].name
    base = set(online.outputs[1].dims)
    owned = {oid}
    for c in list(graph.nodes):
        if c.kind is not OpKind.CONTRACT or set(c.dims) != red:
            continue
        for p_name, w_name in (c.inputs, c.inputs[::-1]):
            pnode = graph.producer(p_name)
            fn = pnode.fn
            if not (pnode.kind is OpKind.POINTWISE and isinstance(fn, Call) and fn.op == "div"
                    and fn.args[0] == Ref(numer) and isinstance(fn.args[1], Ref)):
                continue
            den = graph.producer(fn.args[1].name)
            if not (den.kind is OpKind.BROADCAST and den.inputs[0] == sum_name and set(den.dims) == red):
                continue
            if owned & _ancestors(graph, w_name):
                continue
            online = graph.node(oid)
            k = len(online.outputs) - 2
            acc = TensorRef(f"{oid}.acc{k}", c.out.dims, c.out.dtype)
            online = replace(online, inputs=online.inputs + (w_name,), outputs=online.outputs + (acc,))
            new_dims = tuple(d for d in c.out.dims if d not in base)
            den_ref = TensorRef(f"{c.id}.den", c.out.dims, c.out.dtype)
            den_node = OpNode(den_ref.name, OpKind.BROADCAST, (sum_name,), (den_ref,), dims=new_dims)
            div_node = OpNode(c.id, OpKind.POINTWISE, (acc.name, den_ref.name), (c.out,),
                              fn=Call("div", (Ref(acc.name), Ref(den_ref.name))))
            nodes = []
            for n in graph.nodes:
                if n.id == oid:
                    nodes.append(online)
                elif n.id == c.id:
                    nodes.extend([den_node, div_node])
                else:
                    nodes.append(n)
            graph = graph.with_nodes(nodes)
            graph = graph.with_nodes(graph.topological())
            break
    return graph


def try_fuse_semantic(graph: TensorGraph, alg: ReductionAlgebra = SOFTMAX, report: AlgebraReport | None = None) -> SemanticResult:
    """Rewrite every matched two-pass reduction; near-misses become diagnostics."""
    report = report or check_algebra(alg, DEFAULT_SAMPLES)
    result = SemanticResult(graph)
    seen: set[str] = set()
    while True:
        patterns, diags = find_two_pass_patterns(result.graph, alg)
        for d in diags:
            if str(d) not in seen:
                seen.add(str(d))
                result.diagnostics.append(d)
        if not patterns:
            return result
        pattern = patterns[0]
        try:
            result.graph, oid = rewrite_two_pass_to_online(result.graph, pattern, alg, report)
        except RewriteDeclined as exc:
            result.diagnostics.append(exc.diagnostic)
            return result
        result.rewrites.append((pattern, oid))
