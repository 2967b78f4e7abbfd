"""Tiled execution of kernel schedules with memory-traffic accounting.

Each kernel runs one block per cell of its logical grid.  A block evaluates
its fused body on demand: asking for a value over the block's current region
either loads a tile from global memory or computes it from the member node
that produces it, looping over reduction tiles where needed.  Values live in a
per-block scratchpad (a memo keyed by value and region) whose size is capped.
Only the kernel's outputs are written back.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .algebra import SOFTMAX, get_algebra
from .evaluate import (
    EvaluationError,
    align,
    check_bindings,
    contract_arrays,
    eval_naive,
    eval_pointwise,
    reduce_array,
    store,
)
from .fusion import Kernel, KernelSchedule
from .grid import delinearize, tile_ranges
from .ir import OpKind, OpNode, TensorGraph

DEFAULT_SCRATCHPAD_BYTES = 8 * 2**20

Region = tuple[tuple[int, int], ...]


class ExecutionError(RuntimeError):
    pass


class ScratchpadOverflow(ExecutionError):
    def __init__(self, kernel: str, required: int, capacity: int):
        super().__init__(f"{kernel}: scratchpad needs {required} bytes, capacity is {capacity}")
        self.kernel = kernel
        self.required = required
        self.capacity = capacity


class WriteOverlapError(ExecutionError):
    pass


@dataclass
class KernelTraffic:
    name: str
    members: list[str]
    reads: int
    writes: int
    tile_reads: int
    blocks: int
    scratchpad_peak: int
    materialized: dict[str, int] = field(default_factory=dict)


@dataclass
class TrafficReport:
    global_reads: int
    global_writes: int
    intermediate_bytes_materialized: int
    kernel_count: int
    tile_reads: int = 0
    materialized: dict[str, int] = field(default_factory=dict)
    kernels: list[KernelTraffic] = field(default_factory=list)

    @property
    def total_traffic(self) -> int:
        return self.global_reads + self.global_writes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrafficReport":
        d = dict(d)
        d["kernels"] = [KernelTraffic(**k) for k in d.get("kernels", [])]
        return cls(**d)


@dataclass(frozen=True)
class BlockRecord:
    kernel: str
    block: int
    coords: tuple[int, ...]
    writes: tuple[tuple[str, Region], ...]

    def line(self) -> str:
        w = " ".join(f"{v}[{','.join(f'{a}:{b}' for a, b in r)}]" for v, r in self.writes)
        return f"{self.kernel} block={self.block} coords={list(self.coords)} writes={w}"


@dataclass
class ExecutionTrace:
    records: list[BlockRecord] = field(default_factory=list)
    overlaps: int = 0

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


@dataclass(frozen=True)
class ExecConfig:
    scratchpad_bytes: int = DEFAULT_SCRATCHPAD_BYTES
    parallel: bool = False
    workers: int | None = None
    trace: bool = False
    inject_fault: bool = False  # flips the online rescale factor; test hook only


class ExecutionResult(NamedTuple):
    outputs: dict[str, np.ndarray]
    report: TrafficReport
    trace: ExecutionTrace | None


@dataclass(frozen=True)
class _KernelEnv:
    kernel: Kernel
    graph: TensorGraph
    tiles: Mapping[str, int]
    internal: frozenset[str]
    memory: Mapping[str, np.ndarray]
    config: ExecConfig


def _slices(region: Region):
    return tuple(slice(a, b) for a, b in region)


class _Block:
    """Evaluation state for one block of one kernel."""

    def __init__(self, env: _KernelEnv, ctx: dict[str, tuple[int, int]]):
        self.env = env
        self.g = env.graph
        self.ctx = ctx
        self.cache: dict[tuple[str, Region], np.ndarray] = {}
        self.cache_bytes = 0
        self.acc_bytes = 0
        self.peak = 0
        self.loads: list[tuple[str, Region]] = []
        self.tile_reads = 0

    # -- bookkeeping
    def region(self, value: str) -> Region:
        dims = self.g.value(value).dims
        return tuple(self.ctx.get(d, (0, self.g.dims[d])) for d in dims)

    def _charge(self, nbytes: int, acc: bool = False) -> None:
        if acc:
            self.acc_bytes += nbytes
        else:
            self.cache_bytes += nbytes
        used = self.cache_bytes + self.acc_bytes
        self.peak = max(self.peak, used)
        if used > self.env.config.scratchpad_bytes:
            raise ScratchpadOverflow(self.env.kernel.name, used, self.env.config.scratchpad_bytes)

    def _put(self, value: str, arr: np.ndarray) -> np.ndarray:
        key = (value, self.region(value))
        if key not in self.cache:
            self.cache[key] = arr
            self._charge(8 * arr.size)
        return arr

    def _evict(self, dims, ranges) -> None:
        cur = dict(zip(dims, ranges))
        for key in list(self.cache):
            value, region = key
            vdims = self.g.value(value).dims
            if any(d in cur and region[i] == cur[d] for i, d in enumerate(vdims)):
                self.cache_bytes -= 8 * self.cache.pop(key).size

    def loop(self, dims):
        """Iterate the tiles of ``dims``, binding each in the context."""
        dims = list(dims)
        saved = {d: self.ctx.get(d) for d in dims}
        per_dim = [tile_ranges(self.g.dims[d], self.env.tiles[d]) for d in dims]
        try:
            for combo in itertools.product(*per_dim):
                self.ctx.update(zip(dims, combo))
                yield combo
                self._evict(dims, combo)
        finally:
            for d, r in saved.items():
                if r is None:
                    self.ctx.pop(d, None)
                else:
                    self.ctx[d] = r

    # -- evaluation
    def get(self, value: str) -> np.ndarray:
        key = (value, self.region(value))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if value not in self.env.internal:
            region = key[1]
            arr = self.env.memory[value][_slices(region)]
            self.loads.append(key)
            self.tile_reads += arr.size
            return self._put(value, arr)
        node = self.g.producer(value)
        if node.kind is OpKind.ONLINE:
            self._online(node)
            return self.cache[(value, self.region(value))]
        return self._put(value, self._compute(node))

    def _shape(self, value: str) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.region(value))

    def _compute(self, node: OpNode) -> np.ndarray:
        out = node.out
        kind = node.kind
        if kind is OpKind.POINTWISE:
            ops = {v: align(self.get(v), self.g.value(v).dims, out.dims) for v in node.inputs}
            res = eval_pointwise(node, ops)
            shape = self._shape(out.name)
            return res if res.shape == shape else np.broadcast_to(res, shape).copy()
        if kind is OpKind.BROADCAST:
            src = node.inputs[0]
            return np.broadcast_to(align(self.get(src), self.g.value(src).dims, out.dims), self._shape(out.name))
        if kind is OpKind.OUTPUT:
            src = node.inputs[0]
            return align(self.get(src), self.g.value(src).dims, out.dims)
        if kind is OpKind.REDUCE:
            return self._reduce(node)
        if kind is OpKind.CONTRACT:
            return self._contract(node)
        raise EvaluationError(node.id, f"cannot execute {kind}")

    def _reduce(self, node: OpNode) -> np.ndarray:
        src = node.inputs[0]
        sdims = self.g.value(src).dims
        rest = [d for d in sdims if d not in node.dims]
        acc = None
        for _ in self.loop(node.dims):
            part = reduce_array(self.get(src), sdims, node.dims, node.combiner)
            if acc is None:
                acc = np.array(part, dtype=np.float64)
                self._charge(acc.nbytes, acc=True)
            elif node.combiner == "sum":
                acc += part
            elif node.combiner == "max":
                np.maximum(acc, part, out=acc)
            else:
                np.minimum(acc, part, out=acc)
        self.acc_bytes -= acc.nbytes
        return align(acc, rest, node.out.dims)

    def _contract(self, node: OpNode) -> np.ndarray:
        a, b = node.inputs
        ad, bd = self.g.value(a).dims, self.g.value(b).dims
        acc = None
        for _ in self.loop(node.dims):
            part = contract_arrays(self.get(a), ad, self.get(b), bd, node.dims, node.out.dims)
            if acc is None:
                acc = np.array(part, dtype=np.float64)
                self._charge(acc.nbytes, acc=True)
            else:
                acc += part
        self.acc_bytes -= acc.nbytes
        return acc

    def _online(self, node: OpNode) -> None:
        """Tile-level online reduction: rescale state whenever the running max moves."""
        alg = get_algebra(node.algebra or SOFTMAX.name)
        score = node.inputs[0]
        sdims = list(self.g.value(score).dims)
        red = list(node.dims)
        base = [d for d in sdims if d not in red]
        base_shape = tuple(b - a for a, b in (self.ctx.get(d, (0, self.g.dims[d])) for d in base))
        m = np.full(base_shape, alg.stat_init)
        s = np.full(base_shape, alg.zero)
        fields = node.outputs[2:]
        extras = [[d for d in ref.dims if d not in base] for ref in fields]
        accs = []
        for extra in extras:
            ext_shape = tuple(b - a for a, b in (self.ctx.get(d, (0, self.g.dims[d])) for d in extra))
            accs.append(np.zeros(base_shape + (math.prod(ext_shape),)))
        self._charge(m.nbytes + s.nbytes + sum(a.nbytes for a in accs), acc=True)
        flip = self.env.config.inject_fault
        # an inverted correction overflows to inf * 0 by design; keep that quiet
        quiet = np.errstate(invalid="ignore", over="ignore") if flip else contextlib.nullcontext()
        with quiet:
            for _ in self.loop(red):
                x = align(self.get(score), sdims, base + red)
                x = x.reshape(x.shape[: len(base)] + (-1,))
                m_new = alg.stat(m, x.max(axis=-1))
                corr = alg.correction(m_new, m) if flip else alg.correction(m, m_new)
                p = alg.hom(alg.sub(x, m_new[..., None]))
                s = alg.oplus(alg.otimes(s, corr), p.sum(axis=-1))
                p_full = p.reshape(p.shape[:-1] + tuple(b - a for a, b in (self.ctx[d] for d in red)))
                for i, (w, extra) in enumerate(zip(node.inputs[1:], extras)):
                    part = contract_arrays(p_full, base + red, self.get(w), self.g.value(w).dims, red, base + extra)
                    accs[i] = accs[i] * corr[..., None] + part.reshape(accs[i].shape)
                m = m_new
        self.acc_bytes -= m.nbytes + s.nbytes + sum(a.nbytes for a in accs)
        self._put(node.outputs[0].name, align(m, base, node.outputs[0].dims))
        self._put(node.outputs[1].name, align(s, base, node.outputs[1].dims))
        for acc, extra, ref in zip(accs, extras, fields):
            ext_shape = tuple(b - a for a, b in (self.ctx.get(d, (0, self.g.dims[d])) for d in extra))
            self._put(ref.name, align(acc.reshape(base_shape + ext_shape), base + extra, ref.dims))

    def run(self) -> list[tuple[str, Region, np.ndarray]]:
        writes = []
        for v in self.env.kernel.outputs:
            free = [d for d in self.g.value(v).dims if d not in self.ctx]
            for _ in self.loop(free):
                writes.append((v, self.region(v), np.array(self.get(v), dtype=np.float64)))
        return writes


def _block_ctx(kernel: Kernel, tiles: Mapping[str, int], extents: Mapping[str, int], bid: int) -> tuple[tuple[int, ...], dict]:
    coords = tuple(int(c) for c in delinearize(kernel.grid, bid)) if kernel.grid.axes else ()
    ctx = {}
    for (dim, _), c in zip(kernel.grid.axes, coords):
        t = tiles[dim]
        ctx[dim] = (c * t, min((c + 1) * t, extents[dim]))
    return coords, ctx


def execute(schedule: KernelSchedule, bindings: Mapping[str, np.ndarray], config: ExecConfig | None = None) -> ExecutionResult:
    """Run every kernel of ``schedule`` block by block."""
    config = config or ExecConfig()
    g = schedule.graph
    check_bindings(g, bindings)
    tiles = {d: schedule.tiles.tile(d, e) for d, e in g.dims.items()}
    memory: dict[str, np.ndarray] = {}
    for node in g.inputs:
        memory[node.out.name] = store(bindings[node.out.name], node.out.dtype)
    graph_outputs = set(g.outputs)
    trace = ExecutionTrace() if config.trace else None
    per_kernel: list[KernelTraffic] = []
    pool = ThreadPoolExecutor(config.workers) if config.parallel else None
    try:
        for kernel in schedule.kernels:
            per_kernel.append(_run_kernel(kernel, g, tiles, memory, graph_outputs, config, trace, pool))
    finally:
        if pool is not None:
            pool.shutdown()
    materialized = {v: n for k in per_kernel for v, n in k.materialized.items()}
    report = TrafficReport(
        global_reads=sum(k.reads for k in per_kernel),
        global_writes=sum(k.writes for k in per_kernel),
        intermediate_bytes_materialized=sum(n * g.value(v).dtype.itemsize for v, n in materialized.items()),
        kernel_count=len(per_kernel),
        tile_reads=sum(k.tile_reads for k in per_kernel),
        materialized=materialized,
        kernels=per_kernel,
    )
    return ExecutionResult({v: memory[v] for v in g.outputs}, report, trace)


def _run_kernel(kernel, g, tiles, memory, graph_outputs, config, trace, pool) -> KernelTraffic:
    internal = frozenset(r.name for n in kernel.members for r in n.outputs)
    env = _KernelEnv(kernel, g, tiles, internal, memory, config)

    def run_block(bid: int):
        coords, ctx = _block_ctx(kernel, tiles, g.dims, bid)
        blk = _Block(env, ctx)
        writes = blk.run()
        return bid, coords, writes, blk.loads, blk.tile_reads, blk.peak

    bids = range(kernel.grid.total)
    results = list(pool.map(run_block, bids)) if pool is not None else [run_block(b) for b in bids]

    out_bufs = {v: np.zeros(g.shape(v)) for v in kernel.outputs}
    counts = {v: np.zeros(g.shape(v), dtype=np.int32) for v in kernel.outputs} if trace is not None else None
    seen = {v: np.zeros(g.shape(v), dtype=bool) for v in kernel.inputs}
    writes_n = tile_reads = peak = 0
    for bid, coords, writes, loads, treads, bpeak in results:
        for v, region, arr in writes:
            out_bufs[v][_slices(region)] = arr
            writes_n += arr.size
            if counts is not None:
                counts[v][_slices(region)] += 1
        for v, region in loads:
            seen[v][_slices(region)] = True
        tile_reads += treads
        peak = max(peak, bpeak)
        if trace is not None:
            trace.records.append(BlockRecord(kernel.name, bid, coords, tuple((v, r) for v, r, _ in writes)))
    if counts is not None:
        for v, c in counts.items():
            over = int((c > 1).sum())
            if over:
                trace.overlaps += over
                raise WriteOverlapError(f"{kernel.name}: {over} elements of {v!r} written by more than one block")
            if (c == 0).any():
                raise ExecutionError(f"{kernel.name}: {v!r} not fully written")
    materialized = {}
    for v, buf in out_bufs.items():
        ref = g.value(v)
        memory[v] = store(buf, ref.dtype) if v in graph_outputs else buf
        if v not in graph_outputs:
            materialized[v] = buf.size
    return KernelTraffic(
        name=kernel.name,
        members=list(kernel.member_ids),
        reads=int(sum(int(m.sum()) for m in seen.values())),
        writes=writes_n,
        tile_reads=tile_reads,
        blocks=len({r[0] for r in results}),
        scratchpad_peak=peak,
        materialized=materialized,
    )


def execute_unfused(graph: TensorGraph, bindings: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], TrafficReport]:
    """One kernel per operation: every intermediate goes through global memory.

    An output of a computed value is that value's own write, so the copy is
    not a separate kernel; only an output of a graph input is a copy kernel.
    """
    outputs = eval_naive(graph, bindings)
    aliased = {
        n.id: n.inputs[0] for n in graph.nodes
        if n.kind is OpKind.OUTPUT and graph.producer(n.inputs[0]).kind is not OpKind.INPUT
    }
    graph_outputs = set(graph.outputs) | set(aliased.values())
    per_kernel = []
    for node in graph.ops():
        if node.id in aliased:
            continue
        reads = sum(graph.numel(v) for v in dict.fromkeys(node.inputs))
        mat = {r.name: graph.numel(r.name) for r in node.outputs if r.name not in graph_outputs}
        writes = sum(graph.numel(r.name) for r in node.outputs)
        per_kernel.append(KernelTraffic(node.id, [node.id], reads, writes, reads, 1, 0, mat))
    materialized = {v: n for k in per_kernel for v, n in k.materialized.items()}
    report = TrafficReport(
        global_reads=sum(k.reads for k in per_kernel),
        global_writes=sum(k.writes for k in per_kernel),
        intermediate_bytes_materialized=sum(n * graph.value(v).dtype.itemsize for v, n in materialized.items()),
        kernel_count=len(per_kernel),
        tile_reads=sum(k.tile_reads for k in per_kernel),
        materialized=materialized,
        kernels=per_kernel,
    )
    return outputs, report


def compare(a, b) -> tuple[float, float]:
    """(max abs error, max elementwise relative error) between two arrays.

    The relative error of each element is ``|a-b| / max(|a|, |b|, 1e-30)``;
    equal entries (including equal infinities) count as zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.where(a == b, 0.0, np.abs(a - b))
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-30)
    diff = np.where(np.isnan(diff), np.inf, diff)
    rel = np.where(np.isnan(rel), np.inf, rel)
    return float(diff.max()), float(rel.max())


def compare_outputs(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> dict[str, tuple[float, float]]:
    if set(a) != set(b):
        raise ValueError(f"output names differ: {sorted(a)} vs {sorted(b)}")
    return {k: compare(a[k], b[k]) for k in sorted(a)}


def normwise_error(a, b) -> float:
    """``max|a-b|`` relative to the largest magnitude in either tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    abs_err, _ = compare(a, b)
    finite = np.abs(np.concatenate([a[np.isfinite(a)], b[np.isfinite(b)]]))
    scale = max(float(finite.max(initial=0.0)), 1e-30)
    return abs_err / scale
