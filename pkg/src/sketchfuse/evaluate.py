"""Reference evaluation of tensor graphs.

``eval_naive`` runs one node at a time in topological order, materialising
every intermediate in float64.  It is the oracle every fused execution is
checked against, so it shares nothing with the tiled executor beyond the
elementwise kernels below.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .algebra import SOFTMAX, get_algebra, safe_sub
from .ir import Const, DType, Expr, IRError, OpKind, OpNode, Ref, TensorGraph


class EvaluationError(RuntimeError):
    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


def store(arr: np.ndarray, dtype: DType) -> np.ndarray:
    """Round to the storage dtype, keeping a float64 container."""
    if dtype is DType.F32:
        return np.asarray(arr, dtype=np.float32).astype(np.float64)
    return np.asarray(arr, dtype=np.float64)


def align(arr: np.ndarray, src: Sequence[str], dst: Sequence[str]) -> np.ndarray:
    """Transpose ``arr`` (axes named ``src``) into ``dst`` order.

    Dims of ``dst`` absent from ``src`` become size-1 axes.
    """
    src = list(src)
    perm = [src.index(d) for d in dst if d in src]
    out = np.transpose(arr, perm) if perm != list(range(len(perm))) else arr
    shape = [out.shape[perm.index(src.index(d))] if d in src else 1 for d in dst]
    return out.reshape(shape)


def _divide(a, b):
    if np.any(b == 0):
        raise ZeroDivisionError
    return a / b


_UNARY = {"neg": np.negative, "exp": np.exp}
_BINARY = {
    "add": np.add,
    "sub": safe_sub,
    "mul": np.multiply,
    "div": _divide,
    "max2": np.maximum,
    "min2": np.minimum,
}


def apply_expr(expr: Expr, env: Mapping[str, np.ndarray]):
    if isinstance(expr, Ref):
        return env[expr.name]
    if isinstance(expr, Const):
        return np.float64(expr.value)
    args = [apply_expr(a, env) for a in expr.args]
    op = expr.op
    with np.errstate(over="ignore", invalid="ignore"):
        if op in _UNARY:
            return _UNARY[op](args[0])
        if op in _BINARY:
            return _BINARY[op](args[0], args[1])
        if op == "scale":
            return args[0] * args[1]
        if op == "where":
            return np.where(args[0] != 0, args[1], args[2])
    raise IRError(f"unknown pointwise operator {op!r}")


def eval_pointwise(node: OpNode, operands: Mapping[str, np.ndarray]) -> np.ndarray:
    try:
        out = apply_expr(node.fn, operands)
    except ZeroDivisionError:
        raise EvaluationError(node.id, "division by zero") from None
    return np.asarray(out, dtype=np.float64)


def contract_arrays(a, a_dims, b, b_dims, reduced, out_dims) -> np.ndarray:
    """Sum-of-products over ``reduced``; batched matmul under the hood."""
    a_dims, b_dims, reduced, out_dims = list(a_dims), list(b_dims), list(reduced), list(out_dims)
    batch = [d for d in out_dims if d in a_dims and d in b_dims]
    fa = [d for d in out_dims if d in a_dims and d not in b_dims]
    fb = [d for d in out_dims if d in b_dims and d not in a_dims]
    size = dict(zip(a_dims, a.shape)) | dict(zip(b_dims, b.shape))
    nb = math.prod(size[d] for d in batch)
    na = math.prod(size[d] for d in fa)
    nbf = math.prod(size[d] for d in fb)
    nr = math.prod(size[d] for d in reduced)
    at = np.transpose(a, [a_dims.index(d) for d in batch + fa + reduced]).reshape(nb, na, nr)
    bt = np.transpose(b, [b_dims.index(d) for d in batch + reduced + fb]).reshape(nb, nr, nbf)
    res = np.matmul(at, bt).reshape([size[d] for d in batch + fa + fb])
    order = batch + fa + fb
    return np.transpose(res, [order.index(d) for d in out_dims])


def reduce_array(arr, dims, reduced, combiner: str) -> np.ndarray:
    axes = tuple(list(dims).index(d) for d in reduced)
    if combiner == "sum":
        return arr.sum(axis=axes)
    if combiner == "max":
        return arr.max(axis=axes)
    if combiner == "min":
        return arr.min(axis=axes)
    raise IRError(f"unknown combiner {combiner!r}")


def broadcast_array(arr, src_dims, out_dims, extents: Mapping[str, int]) -> np.ndarray:
    shaped = align(arr, src_dims, out_dims)
    return np.broadcast_to(shaped, tuple(extents[d] for d in out_dims))


def online_sequential(node: OpNode, score, score_dims, weights, weight_dims) -> list[np.ndarray]:
    """Element-by-element online recurrence over the node's reduced dims.

    Returns the field arrays (max, sum, acc...) in their declared dim orders.
    """
    alg = get_algebra(node.algebra or SOFTMAX.name)
    red = list(node.dims)
    base = [d for d in score_dims if d not in red]
    x = align(score, score_dims, base + red)
    x = x.reshape(x.shape[: len(base)] + (-1,))
    m = np.full(x.shape[:-1], alg.stat_init)
    s = np.full(x.shape[:-1], alg.zero)
    ws, accs, extras = [], [], []
    for w, wd, ref in zip(weights, weight_dims, node.outputs[2:]):
        extra = [d for d in ref.dims if d not in base]
        wt = align(w, wd, base + extra + red)
        wt = wt.reshape(wt.shape[: len(base) + len(extra)] + (-1,))
        ws.append(wt)
        extras.append(extra)
        accs.append(np.zeros(x.shape[:-1] + wt.shape[len(base): len(base) + len(extra)]))
    for j in range(x.shape[-1]):
        m_new = alg.stat(m, x[..., j])
        corr = alg.correction(m, m_new)
        p = alg.hom(alg.sub(x[..., j], m_new))
        s = alg.oplus(alg.otimes(s, corr), p)
        for k, wt in enumerate(ws):
            tail = (1,) * len(extras[k])
            accs[k] = accs[k] * corr.reshape(corr.shape + tail) + p.reshape(p.shape + tail) * wt[..., j]
        m = m_new
    out = [align(m, base, node.outputs[0].dims), align(s, base, node.outputs[1].dims)]
    for acc, extra, ref in zip(accs, extras, node.outputs[2:]):
        out.append(align(acc, base + extra, ref.dims))
    return out


def eval_node(graph: TensorGraph, node: OpNode, env: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate a single node on fully materialised operands (float64)."""
    vals = [env[v] for v in node.inputs]
    refs = [graph.value(v) for v in node.inputs]
    kind = node.kind
    if kind is OpKind.POINTWISE:
        out = node.out
        operands = {r.name: align(v, r.dims, out.dims) for r, v in zip(refs, vals)}
        res = eval_pointwise(node, operands)
        return [np.broadcast_to(res, graph.shape(out.name)).copy() if res.shape != graph.shape(out.name) else res]
    if kind is OpKind.BROADCAST:
        return [broadcast_array(vals[0], refs[0].dims, node.out.dims, graph.dims)]
    if kind is OpKind.REDUCE:
        res = reduce_array(vals[0], refs[0].dims, node.dims, node.combiner)
        rest = [d for d in refs[0].dims if d not in node.dims]
        return [align(res, rest, node.out.dims)]
    if kind is OpKind.CONTRACT:
        return [contract_arrays(vals[0], refs[0].dims, vals[1], refs[1].dims, node.dims, node.out.dims)]
    if kind is OpKind.OUTPUT:
        return [align(vals[0], refs[0].dims, node.out.dims)]
    if kind is OpKind.ONLINE:
        return online_sequential(node, vals[0], list(refs[0].dims), vals[1:], [list(r.dims) for r in refs[1:]])
    raise EvaluationError(node.id, f"cannot evaluate {kind}")


def check_bindings(graph: TensorGraph, bindings: Mapping[str, np.ndarray]) -> None:
    for node in graph.inputs:
        name = node.out.name
        if name not in bindings:
            raise EvaluationError(node.id, f"missing binding for input {name!r}")
        got = np.shape(bindings[name])
        want = graph.shape(name)
        if tuple(got) != want:
            raise EvaluationError(node.id, f"extent mismatch: expected {want}, got {tuple(got)}")


def eval_naive(graph: TensorGraph, bindings: Mapping[str, np.ndarray], *, keep_all: bool = False) -> dict[str, np.ndarray]:
    """Evaluate ``graph`` node by node, materialising every value.

    Inputs and graph outputs are rounded to their storage dtype; everything in
    between is kept in float64.  Returns the graph outputs (or every value with
    ``keep_all``) as float64 arrays.
    """
    check_bindings(graph, bindings)
    env: dict[str, np.ndarray] = {}
    for node in graph.topological():
        if node.kind is OpKind.INPUT:
            env[node.out.name] = store(bindings[node.out.name], node.out.dtype)
            continue
        results = eval_node(graph, node, env)
        for ref, arr in zip(node.outputs, results):
            # intermediates stay at accumulator precision; only graph outputs are rounded
            env[ref.name] = store(arr, ref.dtype) if node.kind is OpKind.OUTPUT else np.asarray(arr, dtype=np.float64)
    if keep_all:
        return env
    return {name: env[name] for name in graph.outputs}


__all__ = [
    "EvaluationError",
    "align",
    "apply_expr",
    "contract_arrays",
    "eval_naive",
    "eval_node",
    "online_sequential",
    "store",
]
