"""Line-oriented text format for tensor graphs.

Grammar (one statement per line, ``#`` starts a comment)::

    dtype f32|f64                         default dtype for inputs
    dim NAME = EXTENT
    NAME = input([f32|f64]) dims=[D, ...]
    NAME = contract(A, B) dims=[R, ...] [out=[D, ...]]
    NAME = reduce_sum|reduce_max|reduce_min(X) dims=[R, ...]
    NAME = broadcast(X) dims=[NEW, ...] [out=[D, ...]]
    NAME = output(X)
    NAME = EXPR [dims=[D, ...]]           pointwise expression

``EXPR`` nests the pointwise operators (add, sub, mul, div, neg, exp, max2,
min2, where, scale) over value names and numeric literals (``inf`` and
``-inf`` included).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .ir import (
    POINTWISE_OPS,
    Call,
    Const,
    DType,
    Expr,
    GraphBuilder,
    IRError,
    OpKind,
    Ref,
    TensorGraph,
    expr_refs,
    format_expr,
)

_TOKEN = re.compile(
    r"\s*(?:(?P<num>-?(?:inf|\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?))(?![\w.])"
    r"|(?P<name>[A-Za-z_][\w.]*)|(?P<punct>[()\[\],=]))"
)
_STRUCTURAL = {"input", "contract", "reduce_sum", "reduce_max", "reduce_min", "broadcast", "output"}


class DslError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass
class _Tokens:
    items: list[tuple[str, str]]
    pos: int = 0

    def peek(self) -> tuple[str, str] | None:
        return self.items[self.pos] if self.pos < len(self.items) else None

    def take(self, kind: str | None = None, text: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise ValueError("unexpected end of line")
        if (kind and tok[0] != kind) or (text and tok[1] != text):
            raise ValueError(f"expected {text or kind}, got {tok[1]!r}")
        self.pos += 1
        return tok[1]

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok[1] == text


def _tokenize(src: str) -> _Tokens:
    out = []
    pos = 0
    src = src.rstrip()
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if not m or m.end() == pos:
            raise ValueError(f"unexpected character {src[pos:].strip()[:1]!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return _Tokens(out)


def _parse_expr(t: _Tokens) -> Expr:
    kind, text = t.peek() or (None, None)
    if kind == "num":
        t.take()
        return Const(float(text))
    name = t.take("name")
    if not t.at("("):
        return Ref(name)
    if name not in POINTWISE_OPS:
        raise ValueError(f"unknown operator {name!r}")
    t.take(text="(")
    args = [_parse_expr(t)]
    while t.at(","):
        t.take()
        args.append(_parse_expr(t))
    t.take(text=")")
    if len(args) != POINTWISE_OPS[name]:
        raise ValueError(f"{name} expects {POINTWISE_OPS[name]} operands, got {len(args)}")
    return Call(name, tuple(args))


def _parse_attrs(t: _Tokens) -> dict[str, list[str]]:
    attrs: dict[str, list[str]] = {}
    while t.peek() is not None:
        key = t.take("name")
        if key not in ("dims", "out"):
            raise ValueError(f"unknown attribute {key!r}")
        if key in attrs:
            raise ValueError(f"repeated attribute {key!r}")
        t.take(text="=")
        t.take(text="[")
        names: list[str] = []
        while not t.at("]"):
            names.append(t.take("name"))
            if not t.at("]"):
                t.take(text=",")
        t.take(text="]")
        attrs[key] = names
    return attrs


def _call_args(t: _Tokens) -> list[str]:
    t.take(text="(")
    args: list[str] = []
    while not t.at(")"):
        args.append(t.take("name"))
        if not t.at(")"):
            t.take(text=",")
    t.take(text=")")
    return args


def _statement(b: GraphBuilder, name: str, t: _Tokens, default_dtype: DType) -> None:
    first = t.peek()
    op = first[1] if first and first[0] == "name" else None
    is_call = op in _STRUCTURAL and t.pos + 1 < len(t.items) and t.items[t.pos + 1][1] == "("
    if not is_call:
        expr = _parse_expr(t)
        attrs = _parse_attrs(t)
        if "out" in attrs:
            raise ValueError("pointwise statements take dims=[...], not out=[...]")
        b.pointwise(name, expr, attrs.get("dims"))
        return
    t.take()
    args = _call_args(t)
    attrs = _parse_attrs(t)

    def want(n: int) -> None:
        if len(args) != n:
            raise ValueError(f"{op} expects {n} operand(s), got {len(args)}")

    if op == "input":
        if len(args) > 1:
            raise ValueError("input takes at most a dtype")
        dtype = DType(args[0]) if args else default_dtype
        if "dims" not in attrs:
            raise ValueError("input needs dims=[...]")
        b.input(name, attrs["dims"], dtype)
    elif op == "contract":
        want(2)
        b.contract(name, args[0], args[1], attrs.get("dims", []), attrs.get("out"))
    elif op.startswith("reduce_"):
        want(1)
        if "dims" not in attrs:
            raise ValueError(f"{op} needs dims=[...]")
        b.reduce(name, args[0], op[len("reduce_"):], attrs["dims"])
    elif op == "broadcast":
        want(1)
        b.broadcast(name, args[0], attrs.get("dims", []), attrs.get("out"))
    else:
        want(1)
        b.output(name, args[0])


def parse_program(text: str, lines: dict[str, int] | None = None) -> TensorGraph:
    """Parse the text format into a graph; errors carry the line number.

    When ``lines`` is given it is filled with the defining line of each node.
    """
    b = GraphBuilder(dtype=DType.F32)
    default_dtype = DType.F32
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("dtype "):
                default_dtype = DType(line.split()[1])
                b.dtype = default_dtype
                continue
            if line.startswith("dim "):
                m = re.fullmatch(r"dim\s+([A-Za-z_]\w*)\s*=\s*(\d+)", line)
                if not m:
                    raise ValueError("expected 'dim NAME = EXTENT'")
                if int(m.group(2)) < 1:
                    raise ValueError("extent must be >= 1")
                b.dim(m.group(1), int(m.group(2)))
                continue
            m = re.match(r"([A-Za-z_][\w.]*)\s*=\s*(.+)$", line)
            if not m:
                raise ValueError("expected 'NAME = ...'")
            _statement(b, m.group(1), _tokenize(m.group(2)), default_dtype)
            if lines is not None:
                lines[m.group(1)] = lineno
        except (ValueError, IRError, KeyError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise DslError(lineno, str(msg)) from None
    return b.build()


def _names(ds) -> str:
    return "[" + ", ".join(ds) + "]"


def format_program(graph: TensorGraph) -> str:
    """Inverse of :func:`parse_program` for graphs built from the same operations."""
    lines = []
    dtypes = {n.out.dtype for n in graph.inputs}
    default = dtypes.pop() if len(dtypes) == 1 else DType.F32
    lines.append(f"dtype {default.value}")
    for d, e in graph.dims.items():
        lines.append(f"dim {d} = {e}")
    for n in graph.nodes:
        name = n.out.name if len(n.outputs) == 1 else n.id
        if n.kind is OpKind.INPUT:
            dt = "" if n.out.dtype is default else n.out.dtype.value
            lines.append(f"{name} = input({dt}) dims={_names(n.out.dims)}")
        elif n.kind is OpKind.CONTRACT:
            lines.append(f"{name} = contract({', '.join(n.inputs)}) dims={_names(n.dims)} out={_names(n.out.dims)}")
        elif n.kind is OpKind.REDUCE:
            lines.append(f"{name} = reduce_{n.combiner}({n.inputs[0]}) dims={_names(n.dims)}")
        elif n.kind is OpKind.BROADCAST:
            lines.append(f"{name} = broadcast({n.inputs[0]}) dims={_names(n.dims)} out={_names(n.out.dims)}")
        elif n.kind is OpKind.OUTPUT:
            lines.append(f"{name} = output({n.inputs[0]})")
        elif n.kind is OpKind.POINTWISE:
            refs = expr_refs(n.fn)
            text = f"{name} = {format_expr(n.fn)}"
            if not refs or graph.value(refs[0]).dims != n.out.dims:
                text += f" dims={_names(n.out.dims)}"
            lines.append(text)
        else:
            raise IRError(f"{n.id}: {n.kind.value} nodes have no text form")
    return "\n".join(lines) + "\n"


__all__ = ["DslError", "format_program", "parse_program"]
