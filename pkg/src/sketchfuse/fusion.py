"""Computation sketches, the fusion rules, and the kernel scheduler.

A sketch is the ordered pair ``[(p dims), (r dims)]`` of a loop nest.  A
producer ``[(Pc, Pp), (R0)]`` fuses into a consumer ``[(Pc), (Pp, R1)]`` by
running the producer's extra parallel dims ``Pp`` sequentially inside the
consumer's reduction loop; the producer's own reduction dims are appended
innermost.  The tiled variant applies the same rule after dropping every dim
whose tile covers its whole extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .algebra import SOFTMAX, ReductionAlgebra
from .grid import LogicalGrid, TileConfig, default_tile, trip_count
from .ir import IRError, OpKind, OpNode, TensorGraph, validate
from .semantic import SemanticDiagnostic, try_fuse_semantic


@dataclass(frozen=True)
class ComputationSketch:
    p_dims: tuple[tuple[str, int], ...]
    r_dims: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        p = tuple((str(n), int(e)) for n, e in self.p_dims)
        r = tuple((str(n), int(e)) for n, e in self.r_dims)
        clash = {n for n, _ in p} & {n for n, _ in r}
        if clash:
            raise IRError(f"dims both parallel and reduction: {sorted(clash)}")
        object.__setattr__(self, "p_dims", p)
        object.__setattr__(self, "r_dims", r)

    @property
    def p_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.p_dims)

    @property
    def r_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.r_dims)

    @property
    def extents(self) -> dict[str, int]:
        return dict(self.p_dims + self.r_dims)

    def __str__(self) -> str:
        return f"[({', '.join(self.p_names)}), ({', '.join(self.r_names)})]"

    @classmethod
    def of(cls, p: Sequence[str], r: Sequence[str], extents: Mapping[str, int]) -> "ComputationSketch":
        return cls(tuple((d, extents[d]) for d in p), tuple((d, extents[d]) for d in r))


@dataclass(frozen=True)
class TiledDim:
    name: str
    extent: int
    tile: int
    trips: int

    @property
    def eliminated(self) -> bool:
        return self.trips == 1


@dataclass(frozen=True)
class TiledSketch:
    p_tiles: tuple[TiledDim, ...]
    r_tiles: tuple[TiledDim, ...]

    @property
    def p_loop(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.p_tiles if not t.eliminated)

    @property
    def r_loop(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.r_tiles if not t.eliminated)

    @property
    def eliminated(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.p_tiles + self.r_tiles if t.eliminated)

    def __str__(self) -> str:
        p = ", ".join(f"{n}_t" for n in self.p_loop)
        r = ", ".join(f"{n}_t" for n in self.r_loop)
        return f"[({p}), ({r})]"


def tile_sketch(sketch: ComputationSketch, tiles: TileConfig) -> TiledSketch:
    def conv(dims):
        out = []
        for name, extent in dims:
            t = min(tiles.tile(name, extent), extent)
            out.append(TiledDim(name, extent, t, trip_count(extent, t)))
        return tuple(out)

    return TiledSketch(conv(sketch.p_dims), conv(sketch.r_dims))


def extract_sketch(graph: TensorGraph, node: OpNode) -> ComputationSketch:
    """Loop-nest signature of a single operation."""
    if node.kind is OpKind.INPUT:
        return ComputationSketch(())
    p: list[str] = []
    for ref in node.outputs:
        p.extend(d for d in ref.dims if d not in p)
    r = list(node.dims) if node.kind in (OpKind.REDUCE, OpKind.CONTRACT, OpKind.ONLINE) else []
    return ComputationSketch.of(p, r, graph.dims)


class FusionKind(str, Enum):
    STRUCTURAL = "structural"
    SEMANTIC = "semantic"
    TILING_AWARE = "tiling-aware"


@dataclass(frozen=True)
class FusionPlan:
    producer: str
    consumer: str
    demoted_dims: tuple[str, ...]
    sketch: ComputationSketch
    kind: FusionKind
    eliminated_dims: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "producer": self.producer,
            "consumer": self.consumer,
            "kind": self.kind.value,
            "demoted": list(self.demoted_dims),
            "eliminated": list(self.eliminated_dims),
            "sketch": str(self.sketch),
        }


def _fuse_rule(p0, r0, p1, r1, loop: set[str] | None = None):
    """Shared legality test; returns the demoted dims or None.

    With ``loop`` given, only those dims take part in the checks (tile space).
    """
    keep = (lambda ds: [d for d in ds if d in loop]) if loop is not None else list
    lp0, lr0, lp1, lr1 = keep(p0), keep(r0), keep(p1), keep(r1)
    if not set(lp1) <= set(lp0):
        return None
    demoted = [d for d in lp0 if d not in lp1]
    if not set(demoted) <= set(lr1):
        return None
    if set(lr0) & set(lr1):
        return None  # the consumer would need the producer's finished reduction
    if set(lr0) & set(lp1):
        return None
    return tuple(d for d in p0 if d not in p1)


def _fused_sketch(producer: ComputationSketch, consumer: ComputationSketch) -> ComputationSketch:
    p1 = consumer.p_names
    r = list(consumer.r_names) + [d for d in producer.r_names if d not in consumer.r_names and d not in p1]
    ext = producer.extents | consumer.extents
    return ComputationSketch.of(p1, r, ext)


def try_fuse_structural(producer: ComputationSketch, consumer: ComputationSketch, *,
                        producer_id: str = "", consumer_id: str = "") -> FusionPlan | None:
    """Element-space fusion with dimension demotion, or None when illegal."""
    demoted = _fuse_rule(producer.p_names, producer.r_names, consumer.p_names, consumer.r_names)
    if demoted is None:
        return None
    return FusionPlan(producer_id, consumer_id, demoted, _fused_sketch(producer, consumer), FusionKind.STRUCTURAL)


def try_fuse_tiled(producer: ComputationSketch, consumer: ComputationSketch, tiles: TileConfig, *,
                   producer_id: str = "", consumer_id: str = "") -> FusionPlan | None:
    """The structural rule applied to tile-space sketches (trip-1 dims dropped)."""
    tp, tc = tile_sketch(producer, tiles), tile_sketch(consumer, tiles)
    loop = set(tp.p_loop + tp.r_loop + tc.p_loop + tc.r_loop)
    demoted = _fuse_rule(producer.p_names, producer.r_names, consumer.p_names, consumer.r_names, loop)
    if demoted is None:
        return None
    fused = _fused_sketch(producer, consumer)
    elim = tile_sketch(fused, tiles).eliminated
    return FusionPlan(producer_id, consumer_id, demoted, fused, FusionKind.TILING_AWARE, elim)


# -- scheduling -------------------------------------------------------------------

PASSES = ("semantic", "structural", "tiled")


@dataclass(frozen=True)
class FusionOptions:
    semantic: bool = True
    structural: bool = True
    tiled: bool = True
    order: tuple[str, ...] = PASSES

    def enabled(self, name: str) -> bool:
        return bool(getattr(self, name))


@dataclass(frozen=True)
class Kernel:
    index: int
    members: tuple[OpNode, ...]
    sketch: ComputationSketch
    tiled: TiledSketch
    demoted: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    grid: LogicalGrid

    @property
    def name(self) -> str:
        return f"k{self.index}"

    @property
    def member_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.members)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "members": list(self.member_ids),
            "sketch": str(self.sketch),
            "tiled_sketch": str(self.tiled),
            "demoted": list(self.demoted),
            "eliminated": list(self.tiled.eliminated),
            "grid": [[n, t] for n, t in self.grid.axes],
            "blocks": self.grid.total,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }


@dataclass(frozen=True)
class KernelSchedule:
    graph: TensorGraph          # after semantic rewriting
    source: TensorGraph
    tiles: TileConfig
    kernels: tuple[Kernel, ...]
    plans: tuple[FusionPlan, ...]
    diagnostics: tuple[str, ...] = ()
    options: FusionOptions = field(default_factory=FusionOptions)

    def __len__(self) -> int:
        return len(self.kernels)

    def kernel_of(self, node_id: str) -> Kernel:
        for k in self.kernels:
            if node_id in k.member_ids:
                return k
        raise KeyError(node_id)

    def materialized(self) -> list[str]:
        """Values written to global memory that are not graph outputs."""
        outs = set(self.graph.outputs)
        return [v for k in self.kernels for v in k.outputs if v not in outs]

    def to_dict(self) -> dict:
        return {
            "kernel_count": len(self.kernels),
            "kernels": [k.to_dict() for k in self.kernels],
            "plans": [p.to_dict() for p in self.plans],
            "tiles": dict(sorted(self.tiles.sizes.items())),
            "diagnostics": list(self.diagnostics),
        }


@dataclass
class _Group:
    members: list[str]          # node ids
    p: tuple[str, ...]
    r: tuple[str, ...]
    demoted: tuple[str, ...] = ()


def graph_tiles(graph: TensorGraph, overrides: TileConfig | Mapping[str, int] | None = None) -> TileConfig:
    """Default tile for every dim of ``graph`` with ``overrides`` on top."""
    sizes = {d: default_tile(e) for d, e in graph.dims.items()}
    if isinstance(overrides, TileConfig):
        sizes.update(overrides.sizes)
    elif overrides:
        sizes.update(overrides)
    for d, e in graph.dims.items():
        sizes[d] = min(int(sizes[d]), e)
    return TileConfig(sizes)


class _Scheduler:
    def __init__(self, graph: TensorGraph, tiles: TileConfig):
        self.g = graph
        self.tiles = tiles
        self.groups: dict[int, _Group] = {}
        self.group_of: dict[str, int] = {}
        for node in graph.nodes:
            if node.kind is OpKind.INPUT:
                continue
            gid = graph.index(node.id)
            sk = extract_sketch(graph, node)
            self.groups[gid] = _Group([node.id], sk.p_names, sk.r_names)
            self.group_of[node.id] = gid
        self.plans: list[FusionPlan] = []

    def sketch(self, gid: int) -> ComputationSketch:
        grp = self.groups[gid]
        return ComputationSketch.of(grp.p, grp.r, self.g.dims)

    def loop_p(self, p: Sequence[str]) -> list[str]:
        return [d for d in p if self.tiles.trip(d, self.g.dims[d]) > 1]

    def group_deps(self, gid: int) -> set[int]:
        deps = set()
        for nid in self.groups[gid].members:
            for v in self.g.node(nid).inputs:
                pn = self.g.producer(v)
                if pn.kind is not OpKind.INPUT and self.group_of[pn.id] != gid:
                    deps.add(self.group_of[pn.id])
        return deps

    def reaches(self, src: int, dst: int, skip_direct: bool) -> bool:
        """Whether ``dst`` depends on ``src`` through some third group."""
        deps = {g: self.group_deps(g) for g in self.groups}
        stack = [g for g in deps[dst] if not (skip_direct and g == src)]
        seen: set[int] = set()
        while stack:
            g = stack.pop()
            if g == src:
                return True
            if g in seen:
                continue
            seen.add(g)
            stack.extend(deps[g])
        return False

    def outputs_of(self, members: Sequence[str]) -> list[str]:
        mset = set(members)
        outs = []
        for nid in members:
            node = self.g.node(nid)
            for ref in node.outputs:
                users = self.g.consumers(ref.name)
                if node.kind is OpKind.OUTPUT or any(u.id not in mset for u in users):
                    outs.append(ref.name)
        return outs

    def edges(self):
        """Producer/consumer node pairs across groups in deterministic order."""
        cands = []
        for node in self.g.nodes:
            if node.kind is OpKind.INPUT:
                continue
            for v in node.inputs:
                pn = self.g.producer(v)
                if pn.kind is OpKind.INPUT or self.group_of[pn.id] == self.group_of[node.id]:
                    continue
                cands.append((self.g.index(node.id), -self.g.index(pn.id), pn.id, node.id))
        cands.sort()
        seen = set()
        for _, _, pid, cid in cands:
            key = (self.group_of[pid], self.group_of[cid])
            if key not in seen:
                seen.add(key)
                yield pid, cid

    def legal(self, pid: str, cid: str, kind: FusionKind) -> FusionPlan | None:
        g0, g1 = self.group_of[pid], self.group_of[cid]
        s0, s1 = self.sketch(g0), self.sketch(g1)
        if kind is FusionKind.STRUCTURAL:
            plan = try_fuse_structural(s0, s1, producer_id=pid, consumer_id=cid)
        else:
            if try_fuse_structural(s0, s1) is not None:
                return None  # element-space legal: not a tiling-aware fusion
            plan = try_fuse_tiled(s0, s1, self.tiles, producer_id=pid, consumer_id=cid)
        if plan is None or self.reaches(g0, g1, skip_direct=True):
            return None
        members = self.groups[g0].members + self.groups[g1].members
        loop = set(self.loop_p(plan.sketch.p_names))
        for v in self.outputs_of(members):
            if not loop <= set(self.g.value(v).dims):
                return None  # blocks would race on a value lacking a grid dim
        return plan

    def merge(self, plan: FusionPlan) -> None:
        g0, g1 = self.group_of[plan.producer], self.group_of[plan.consumer]
        a, b = self.groups.pop(g0), self.groups[g1]
        b.members = sorted(a.members + b.members, key=self.g.index)
        b.p, b.r = plan.sketch.p_names, plan.sketch.r_names
        b.demoted = a.demoted + b.demoted + plan.demoted_dims
        for nid in a.members:
            self.group_of[nid] = g1
        self.plans.append(plan)

    def sweep(self, kind: FusionKind) -> bool:
        fired = False
        while True:
            for pid, cid in self.edges():
                plan = self.legal(pid, cid, kind)
                if plan is not None:
                    self.merge(plan)
                    fired = True
                    break
            else:
                return fired

    def kernels(self) -> list[Kernel]:
        order: list[int] = []
        deps = {g: self.group_deps(g) for g in self.groups}
        pending = set(self.groups)
        while pending:
            ready = [g for g in pending if deps[g] <= set(order)]
            if not ready:
                raise IRError("kernel dependency cycle")
            nxt = min(ready, key=lambda g: min(self.g.index(n) for n in self.groups[g].members))
            order.append(nxt)
            pending.remove(nxt)
        out = []
        for i, gid in enumerate(order):
            grp = self.groups[gid]
            members = tuple(self.g.node(n) for n in grp.members)
            mset = set(grp.members)
            ins = []
            for n in members:
                for v in n.inputs:
                    if self.g.producer(v).id not in mset and v not in ins:
                        ins.append(v)
            sk = self.sketch(gid)
            ts = tile_sketch(sk, self.tiles)
            grid = LogicalGrid(tuple((t.name, t.trips) for t in ts.p_tiles if not t.eliminated))
            out.append(Kernel(i, members, sk, ts, grp.demoted, tuple(ins), tuple(self.outputs_of(grp.members)), grid))
        return out


def schedule(graph: TensorGraph, alg: ReductionAlgebra = SOFTMAX, tiles: TileConfig | Mapping[str, int] | None = None,
             options: FusionOptions | None = None) -> KernelSchedule:
    """Run the fusion passes to a fixpoint and group nodes into kernels."""
    options = options or FusionOptions()
    diags = validate(graph)
    if diags:
        raise IRError("; ".join(str(d) for d in diags))
    plans: list[FusionPlan] = []
    notes: list[str] = []
    g = graph
    cfg = graph_tiles(graph, tiles)
    sched: _Scheduler | None = None
    while True:
        fired = False
        for name in options.order:
            if not options.enabled(name):
                continue
            if name == "semantic":
                res = try_fuse_semantic(g, alg)
                notes.extend(str(d) for d in res.diagnostics if str(d) not in notes)
                if res.fired:
                    g = res.graph
                    sched = None
                    fired = True
                    for pattern, oid in res.rewrites:
                        sk = extract_sketch(g, g.node(oid))
                        plans.append(FusionPlan(pattern.stat.id, pattern.fold.id, (), sk, FusionKind.SEMANTIC))
                continue
            if sched is None:
                sched = _Scheduler(g, cfg)
            kind = FusionKind.STRUCTURAL if name == "structural" else FusionKind.TILING_AWARE
            fired |= sched.sweep(kind)
        if not fired:
            break
    if sched is None:
        sched = _Scheduler(g, cfg)
    plans.extend(sched.plans)
    return KernelSchedule(g, graph, cfg, tuple(sched.kernels()), tuple(plans), tuple(notes), options)


__all__ = [
    "ComputationSketch",
    "FusionKind",
    "FusionOptions",
    "FusionPlan",
    "Kernel",
    "KernelSchedule",
    "SemanticDiagnostic",
    "TiledDim",
    "TiledSketch",
    "extract_sketch",
    "graph_tiles",
    "schedule",
    "tile_sketch",
    "try_fuse_structural",
    "try_fuse_tiled",
]
