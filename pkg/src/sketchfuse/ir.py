"""Loop-level tensor IR.

Every tensor axis is a named dimension with a fixed extent.  Inside one
operation a dimension is either parallel (kept in the output) or a reduction
dimension (consumed).  Values are produced by nodes in SSA style; most nodes
produce a single value named after the node, the online-reduction node
produces several named fields (``<id>.max``, ``<id>.sum``, ``<id>.acc0`` ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence, Union


class DType(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 8


class DimKind(str, Enum):
    PARALLEL = "p"
    REDUCTION = "r"


class OpKind(str, Enum):
    INPUT = "input"
    POINTWISE = "pointwise"
    REDUCE = "reduce"
    CONTRACT = "contract"
    BROADCAST = "broadcast"
    ONLINE = "online"
    OUTPUT = "output"


class IRError(ValueError):
    """Raised when a graph cannot be built or rewritten."""


@dataclass(frozen=True)
class Dim:
    name: str
    extent: int
    kind: DimKind = DimKind.PARALLEL


@dataclass(frozen=True)
class TensorRef:
    name: str
    dims: tuple[str, ...]
    dtype: DType = DType.F32


# -- pointwise expressions -------------------------------------------------

@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Call:
    op: str
    args: tuple["Expr", ...]


Expr = Union[Ref, Const, Call]

# operator -> arity; "scale" takes (expr, Const)
POINTWISE_OPS: dict[str, int] = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "neg": 1,
    "exp": 1,
    "max2": 2,
    "min2": 2,
    "where": 3,
    "scale": 2,
}

REDUCE_COMBINERS = {"sum": 0.0, "max": -math.inf, "min": math.inf}


def expr_refs(expr: Expr) -> list[str]:
    """Value names referenced by ``expr``, in first-use order."""
    out: list[str] = []

    def walk(e: Expr) -> None:
        if isinstance(e, Ref):
            if e.name not in out:
                out.append(e.name)
        elif isinstance(e, Call):
            for a in e.args:
                walk(a)

    walk(expr)
    return out


def rename_refs(expr: Expr, mapping: Mapping[str, str]) -> Expr:
    if isinstance(expr, Ref):
        return Ref(mapping.get(expr.name, expr.name))
    if isinstance(expr, Call):
        return Call(expr.op, tuple(rename_refs(a, mapping) for a in expr.args))
    return expr


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Ref):
        return expr.name
    if isinstance(expr, Const):
        return format_number(expr.value)
    return f"{expr.op}({', '.join(format_expr(a) for a in expr.args)})"


def format_number(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


# -- nodes and graphs -------------------------------------------------------

@dataclass(frozen=True)
class OpNode:
    """One operation.

    ``dims`` holds the reduced dims for REDUCE/CONTRACT/ONLINE and the newly
    introduced dims for BROADCAST.  ONLINE nodes read ``inputs[0]`` as the
    score tensor and every further input as a weight tensor contracted against
    the normalised scores.
    """

    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    outputs: tuple[TensorRef, ...]
    fn: Expr | None = None
    combiner: str | None = None
    dims: tuple[str, ...] = ()
    init: float | None = None
    algebra: str | None = None

    @property
    def out(self) -> TensorRef:
        if len(self.outputs) != 1:
            raise IRError(f"node {self.id!r} has {len(self.outputs)} outputs")
        return self.outputs[0]


@dataclass(frozen=True)
class TensorGraph:
    """Immutable DAG of operations over a shared dimension table."""

    dims: Mapping[str, int]
    nodes: tuple[OpNode, ...]
    _producer: dict[str, OpNode] = field(default_factory=dict, init=False, repr=False, compare=False)
    _values: dict[str, TensorRef] = field(default_factory=dict, init=False, repr=False, compare=False)
    _consumers: dict[str, list[OpNode]] = field(default_factory=dict, init=False, repr=False, compare=False)
    _order: dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", dict(self.dims))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        for i, node in enumerate(self.nodes):
            self._order.setdefault(node.id, i)
            for ref in node.outputs:
                self._producer.setdefault(ref.name, node)
                self._values.setdefault(ref.name, ref)
            for name in dict.fromkeys(node.inputs):
                self._consumers.setdefault(name, []).append(node)

    # lookups
    def node(self, node_id: str) -> OpNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def value(self, name: str) -> TensorRef:
        return self._values[name]

    def has_value(self, name: str) -> bool:
        return name in self._values

    def producer(self, name: str) -> OpNode:
        return self._producer[name]

    def consumers(self, name: str) -> list[OpNode]:
        return list(self._consumers.get(name, ()))

    def index(self, node_id: str) -> int:
        return self._order[node_id]

    def extent(self, dim: str) -> int:
        return self.dims[dim]

    def shape(self, name: str) -> tuple[int, ...]:
        return tuple(self.dims[d] for d in self.value(name).dims)

    def numel(self, name: str) -> int:
        return math.prod(self.shape(name))

    @property
    def inputs(self) -> list[OpNode]:
        return [n for n in self.nodes if n.kind is OpKind.INPUT]

    @property
    def outputs(self) -> list[str]:
        return [n.out.name for n in self.nodes if n.kind is OpKind.OUTPUT]

    def ops(self) -> list[OpNode]:
        return [n for n in self.nodes if n.kind is not OpKind.INPUT]

    def topological(self) -> list[OpNode]:
        """Nodes in dependency order, ties broken by insertion order."""
        order = topo_sort(self.nodes, self._producer)
        if order is None:
            raise IRError("graph contains a cycle")
        return order

    def with_nodes(self, nodes: Iterable[OpNode]) -> "TensorGraph":
        return TensorGraph(self.dims, tuple(nodes))

    def __iter__(self) -> Iterator[OpNode]:
        return iter(self.nodes)


def topo_sort(nodes: Sequence[OpNode], producer: Mapping[str, OpNode]) -> list[OpNode] | None:
    index = {n.id: i for i, n in enumerate(nodes)}
    deps: dict[str, set[str]] = {}
    for n in nodes:
        deps[n.id] = {producer[v].id for v in n.inputs if v in producer and producer[v].id != n.id}
        if any(v in producer and producer[v].id == n.id for v in n.inputs):
            return None
    done: list[OpNode] = []
    placed: set[str] = set()
    remaining = list(nodes)
    while remaining:
        ready = [n for n in remaining if deps[n.id] <= placed]
        if not ready:
            return None
        nxt = min(ready, key=lambda n: index[n.id])
        done.append(nxt)
        placed.add(nxt.id)
        remaining.remove(nxt)
    return done


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    node: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: {self.message}"


def validate(graph: TensorGraph) -> list[Diagnostic]:
    """Check every IR invariant; an empty list means the graph is well formed."""
    diags: list[Diagnostic] = []
    for name, extent in graph.dims.items():
        if not isinstance(extent, int) or extent < 1:
            diags.append(Diagnostic(name, f"dimension {name!r} has extent {extent!r} < 1"))

    seen_ids: set[str] = set()
    seen_values: set[str] = set()
    for node in graph.nodes:
        if node.id in seen_ids:
            diags.append(Diagnostic(node.id, "duplicate node id"))
        seen_ids.add(node.id)
        for ref in node.outputs:
            if ref.name in seen_values:
                diags.append(Diagnostic(node.id, f"value {ref.name!r} defined twice"))
            seen_values.add(ref.name)
            if len(set(ref.dims)) != len(ref.dims):
                diags.append(Diagnostic(node.id, f"repeated dims in {ref.dims}"))
            for d in ref.dims:
                if d not in graph.dims:
                    diags.append(Diagnostic(node.id, f"unknown dimension {d!r}"))

    for node in graph.nodes:
        missing = [v for v in node.inputs if not graph.has_value(v)]
        for v in missing:
            diags.append(Diagnostic(node.id, f"input {v!r} is not defined"))
        if missing:
            continue
        diags.extend(_check_node(graph, node))

    if topo_sort(graph.nodes, graph._producer) is None:
        diags.append(Diagnostic("<graph>", "cycle"))
    return diags


def _check_node(graph: TensorGraph, node: OpNode) -> list[Diagnostic]:
    out: list[Diagnostic] = []

    def bad(msg: str) -> None:
        out.append(Diagnostic(node.id, msg))

    ins = [graph.value(v) for v in node.inputs]
    kind = node.kind
    if kind is OpKind.INPUT:
        if ins:
            bad("input node takes no operands")
        return out
    if kind is OpKind.OUTPUT:
        if len(ins) != 1 or set(ins[0].dims) != set(node.out.dims):
            bad("output must copy exactly one tensor")
        return out
    if kind is OpKind.POINTWISE:
        if node.fn is None:
            bad("pointwise node without expression")
            return out
        for msg in _check_expr(node.fn):
            bad(msg)
        if set(expr_refs(node.fn)) != set(node.inputs):
            bad("expression references do not match inputs")
        for ref in ins:
            if set(ref.dims) != set(node.out.dims):
                bad(f"operand {ref.name!r} dims {list(ref.dims)} need an explicit broadcast to {list(node.out.dims)}")
        return out
    if kind is OpKind.BROADCAST:
        (src,) = ins
        for d in node.dims:
            if d in src.dims:
                bad(f"broadcast dim {d!r} already present")
        if set(node.out.dims) != set(src.dims) | set(node.dims):
            bad("broadcast output dims must be input dims plus new dims")
        return out
    if kind is OpKind.REDUCE:
        (src,) = ins
        if node.combiner not in REDUCE_COMBINERS:
            bad(f"unknown combiner {node.combiner!r}")
        for d in node.dims:
            if d not in src.dims:
                bad(f"reduce dim {d!r} absent from input {src.name!r}")
        if set(node.out.dims) != set(src.dims) - set(node.dims):
            bad("reduce output dims must be input dims minus reduced dims")
        return out
    if kind is OpKind.CONTRACT:
        if len(ins) != 2:
            bad("contract takes two operands")
            return out
        a, b = ins
        for d in node.dims:
            if d not in a.dims or d not in b.dims:
                bad(f"contraction dim not shared: {d!r}")
        if set(node.out.dims) != (set(a.dims) | set(b.dims)) - set(node.dims):
            bad("contract output dims must be operand dims minus reduced dims")
        return out
    if kind is OpKind.ONLINE:
        score = ins[0]
        for d in node.dims:
            if d not in score.dims:
                bad(f"reduce dim {d!r} absent from input {score.name!r}")
        base = set(score.dims) - set(node.dims)
        for ref in node.outputs[:2]:
            if set(ref.dims) != base:
                bad(f"field {ref.name!r} must span the score's parallel dims")
        for w, acc in zip(ins[1:], node.outputs[2:]):
            if not set(node.dims) <= set(w.dims):
                bad(f"weight {w.name!r} lacks reduced dims")
            if set(acc.dims) != base | (set(w.dims) - set(node.dims)):
                bad(f"field {acc.name!r} dims mismatch")
        return out
    bad(f"unsupported op kind {kind}")
    return out


def _check_expr(expr: Expr) -> list[str]:
    if isinstance(expr, (Ref, Const)):
        return []
    msgs = []
    if expr.op not in POINTWISE_OPS:
        msgs.append(f"unknown pointwise operator {expr.op!r}")
    elif len(expr.args) != POINTWISE_OPS[expr.op]:
        msgs.append(f"{expr.op} expects {POINTWISE_OPS[expr.op]} operands")
    elif expr.op == "scale" and not isinstance(expr.args[1], Const):
        msgs.append("scale factor must be a constant")
    for a in expr.args:
        msgs.extend(_check_expr(a))
    return msgs


def node_dims(graph: TensorGraph, node: OpNode) -> list[Dim]:
    """The node's iteration space with each dim tagged parallel or reduction."""
    seen: dict[str, Dim] = {}
    for ref in node.outputs:
        for d in ref.dims:
            seen.setdefault(d, Dim(d, graph.dims[d], DimKind.PARALLEL))
    if node.kind in (OpKind.REDUCE, OpKind.CONTRACT, OpKind.ONLINE):
        for d in node.dims:
            seen[d] = Dim(d, graph.dims[d], DimKind.REDUCTION)
    return list(seen.values())


# -- construction -----------------------------------------------------------

class GraphBuilder:
    """Incremental builder that infers output dims for each operation."""

    def __init__(self, dims: Mapping[str, int] | None = None, dtype: DType = DType.F32):
        self.dims: dict[str, int] = dict(dims or {})
        self.dtype = DType(dtype)
        self.nodes: list[OpNode] = []
        self._values: dict[str, TensorRef] = {}

    def dim(self, name: str, extent: int) -> str:
        if name in self.dims and self.dims[name] != extent:
            raise IRError(f"dimension {name!r} redefined with extent {extent}")
        self.dims[name] = int(extent)
        return name

    def value(self, name: str) -> TensorRef:
        try:
            return self._values[name]
        except KeyError:
            raise IRError(f"undefined value {name!r}") from None

    def _add(self, node: OpNode) -> str:
        if any(n.id == node.id for n in self.nodes):
            raise IRError(f"duplicate node id {node.id!r}")
        for d in (d for ref in node.outputs for d in ref.dims):
            if d not in self.dims:
                raise IRError(f"unknown dimension {d!r}")
        self.nodes.append(node)
        for ref in node.outputs:
            self._values[ref.name] = ref
        return node.outputs[0].name

    def input(self, name: str, dims: Sequence[str], dtype: DType | str | None = None) -> str:
        ref = TensorRef(name, tuple(dims), DType(dtype) if dtype else self.dtype)
        return self._add(OpNode(name, OpKind.INPUT, (), (ref,)))

    def pointwise(self, name: str, fn: Expr, dims: Sequence[str] | None = None) -> str:
        refs = expr_refs(fn)
        if not refs and dims is None:
            raise IRError(f"{name}: constant-only expression needs explicit dims")
        out_dims = tuple(dims) if dims is not None else self.value(refs[0]).dims
        dtype = self._result_dtype(refs)
        return self._add(OpNode(name, OpKind.POINTWISE, tuple(refs), (TensorRef(name, out_dims, dtype),), fn=fn))

    def contract(self, name: str, a: str, b: str, reduce: Sequence[str], out: Sequence[str] | None = None) -> str:
        ra, rb = self.value(a), self.value(b)
        red = tuple(reduce)
        for d in red:
            if d not in ra.dims or d not in rb.dims:
                raise IRError(f"{name}: contraction dim not shared: {d!r}")
        if out is None:
            out = [d for d in ra.dims if d not in red] + [d for d in rb.dims if d not in red and d not in ra.dims]
        ref = TensorRef(name, tuple(out), self._result_dtype([a, b]))
        return self._add(OpNode(name, OpKind.CONTRACT, (a, b), (ref,), dims=red))

    def reduce(self, name: str, src: str, combiner: str, dims: Sequence[str]) -> str:
        r = self.value(src)
        out = tuple(d for d in r.dims if d not in dims)
        return self._add(
            OpNode(name, OpKind.REDUCE, (src,), (TensorRef(name, out, r.dtype),), combiner=combiner,
                   dims=tuple(dims), init=REDUCE_COMBINERS.get(combiner))
        )

    def broadcast(self, name: str, src: str, new_dims: Sequence[str], out: Sequence[str] | None = None) -> str:
        r = self.value(src)
        out = tuple(out) if out is not None else r.dims + tuple(new_dims)
        return self._add(OpNode(name, OpKind.BROADCAST, (src,), (TensorRef(name, out, r.dtype),), dims=tuple(new_dims)))

    def output(self, name: str, src: str) -> str:
        r = self.value(src)
        return self._add(OpNode(name, OpKind.OUTPUT, (src,), (TensorRef(name, r.dims, r.dtype),)))

    def _result_dtype(self, refs: Sequence[str]) -> DType:
        dts = {self.value(r).dtype for r in refs}
        return DType.F64 if DType.F64 in dts else (dts.pop() if dts else self.dtype)

    def build(self) -> TensorGraph:
        return TensorGraph(self.dims, tuple(self.nodes))


# -- rewrites ---------------------------------------------------------------

def lower_contract(graph: TensorGraph, node_id: str) -> TensorGraph:
    """Replace a contraction by explicit broadcasts, a product and a sum.

    The result keeps the contraction's output value name, so downstream
    consumers are untouched.
    """
    node = graph.node(node_id)
    if node.kind is not OpKind.CONTRACT:
        raise IRError(f"{node_id!r} is not a contraction")
    a, b = (graph.value(v) for v in node.inputs)
    for d in node.dims:
        if d not in a.dims or d not in b.dims:
            raise IRError(f"contraction dim not shared: {d!r}")
    full = node.out.dims + node.dims
    new: list[OpNode] = []
    operands = []
    for ref, tag in ((a, "lhs"), (b, "rhs")):
        missing = tuple(d for d in full if d not in ref.dims)
        if missing:
            bname = f"{node_id}.{tag}"
            new.append(OpNode(bname, OpKind.BROADCAST, (ref.name,), (TensorRef(bname, full, ref.dtype),), dims=missing))
            operands.append(bname)
        else:
            operands.append(ref.name)
    prod = f"{node_id}.prod"
    fn = Call("mul", (Ref(operands[0]), Ref(operands[1])))
    new.append(OpNode(prod, OpKind.POINTWISE, tuple(dict.fromkeys(operands)), (TensorRef(prod, full, node.out.dtype),), fn=fn))
    new.append(replace(node, kind=OpKind.REDUCE, inputs=(prod,), combiner="sum", init=0.0))
    nodes: list[OpNode] = []
    for n in graph.nodes:
        nodes.extend(new if n.id == node_id else [n])
    return graph.with_nodes(nodes)


def eliminate_dead(graph: TensorGraph) -> TensorGraph:
    """Drop operations none of whose outputs reach an Output node."""
    live: set[str] = set()
    keep: set[str] = set()
    for node in reversed(graph.topological()):
        if node.kind in (OpKind.OUTPUT, OpKind.INPUT) or any(r.name in live for r in node.outputs):
            keep.add(node.id)
            live.update(node.inputs)
    return graph.with_nodes(n for n in graph.nodes if n.id in keep)
