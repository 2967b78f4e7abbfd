"""Attention-variant graph builders.

Every variant is written the way a user would write it: a score contraction,
a scale, optional score modifiers, an explicit max/sub/exp/sum/div softmax and
a value contraction.  Masks are constant 0/1 input tensors (1 = masked) that
feed a ``where(mask, -inf, score)``; nothing here is pre-fused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .ir import Call, Const, DType, GraphBuilder, IRError, OpKind, Ref, TensorGraph

MASK_RULES = ("causal", "sliding_window", "prefix_lm", "document")
SCORE_VARIANTS = ("vanilla", "alibi", "softcap") + MASK_RULES
VARIANTS = SCORE_VARIANTS + ("diffattn", "evoformer")
CORPUS_SEQ = (256, 512, 1024)
NEG_INF = Const(-math.inf)


@dataclass(frozen=True)
class MaskSpec:
    """Which (query, key) pairs are hidden from each other."""

    rule: str = "none"
    window: int = 256
    prefix: int = 256
    documents: int = 12

    def __post_init__(self) -> None:
        if self.rule not in ("none",) + MASK_RULES:
            raise IRError(f"unknown mask rule {self.rule!r}")

    def boundaries(self, n: int) -> tuple[int, ...]:
        """First position of each document when ``n`` positions are split evenly."""
        doc = np.arange(n) * self.documents // n
        return tuple(int(i) for i in np.flatnonzero(np.diff(doc, prepend=-1)))

    def matrix(self, m: int, n: int | None = None) -> np.ndarray:
        """Boolean ``[queries, keys]`` array, True where the score is masked."""
        n = m if n is None else n
        q = np.arange(m)[:, None]
        kv = np.arange(n)[None, :]
        if self.rule == "none":
            keep = np.ones((m, n), dtype=bool)
        elif self.rule == "causal":
            keep = kv <= q
        elif self.rule == "sliding_window":
            keep = (q >= kv) & (q - kv <= self.window)
        elif self.rule == "prefix_lm":
            keep = (kv < self.prefix) | (kv <= q)
        else:
            keep = (q * self.documents // m) == (kv * self.documents // n)
        return ~keep


def alibi_slopes(heads: int) -> np.ndarray:
    """Geometric per-head slopes ``2^(-8(h+1)/H)``."""
    return 2.0 ** (-8.0 * (np.arange(heads) + 1) / heads)


@dataclass(frozen=True)
class AttentionSpec:
    variant: str = "vanilla"
    batch: int = 1
    heads: int = 2
    kv_heads: int | None = None
    seq: int = 256
    head_dim: int = 64
    window: int = 256
    prefix: int = 256
    softcap: float = 20.0
    lambda_full: float = 0.5
    documents: int = 12
    rows: int = 2
    dtype: DType = DType.F32

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise IRError(f"unknown variant {self.variant!r}")
        for name in ("batch", "heads", "seq", "head_dim", "rows", "documents"):
            if getattr(self, name) < 1:
                raise IRError(f"{name} must be >= 1")
        if self.kv_heads is not None:
            if self.kv_heads < 1 or self.heads % self.kv_heads:
                raise IRError(f"heads ({self.heads}) must be divisible by kv_heads ({self.kv_heads})")
            if self.variant in ("diffattn", "evoformer"):
                raise IRError(f"{self.variant} has no grouped-query form")
        object.__setattr__(self, "dtype", DType(self.dtype))

    @property
    def grouped(self) -> bool:
        return self.kv_heads is not None

    @property
    def mask(self) -> MaskSpec:
        rule = self.variant if self.variant in MASK_RULES else "none"
        return MaskSpec(rule, self.window, self.prefix, self.documents)

    def with_(self, **changes) -> "AttentionSpec":
        return replace(self, **changes)


@dataclass(frozen=True)
class BuiltVariant:
    graph: TensorGraph
    constants: Mapping[str, np.ndarray] = field(default_factory=dict)


ScoreMod = Callable[[GraphBuilder, str], str]


def _softmax_attention(b: GraphBuilder, tag: str, q: str, k: str, v: str, lead: tuple[str, ...],
                       head_dim: int, mods: list[ScoreMod] = ()) -> str:
    sdims = lead + ("M", "N")
    s = b.contract(f"{tag}scores", q, k, ["D"], out=sdims)
    x = b.pointwise(f"{tag}scaled", Call("scale", (Ref(s), Const(1.0 / math.sqrt(head_dim)))))
    for mod in mods:
        x = mod(b, x)
    m = b.reduce(f"{tag}row_max", x, "max", ["N"])
    mb = b.broadcast(f"{tag}row_max_b", m, ["N"], out=sdims)
    d = b.pointwise(f"{tag}shifted", Call("sub", (Ref(x), Ref(mb))))
    e = b.pointwise(f"{tag}exp", Call("exp", (Ref(d),)))
    l = b.reduce(f"{tag}row_sum", e, "sum", ["N"])
    lb = b.broadcast(f"{tag}row_sum_b", l, ["N"], out=sdims)
    p = b.pointwise(f"{tag}probs", Call("div", (Ref(e), Ref(lb))))
    return b.contract(f"{tag}context", p, v, ["N"], out=lead + ("M", "Dv"))


def _mask_mod(lead: tuple[str, ...]) -> ScoreMod:
    def mod(b: GraphBuilder, x: str) -> str:
        mb = b.broadcast("mask_b", "mask", lead, out=lead + ("M", "N"))
        return b.pointwise("masked", Call("where", (Ref(mb), NEG_INF, Ref(x))))
    return mod


def _bias_mod(name: str, lead: tuple[str, ...]) -> ScoreMod:
    def mod(b: GraphBuilder, x: str) -> str:
        sdims = lead + ("M", "N")
        new = tuple(d for d in sdims if d not in b.value(name).dims)
        bb = b.broadcast(f"{name}_b", name, new, out=sdims)
        return b.pointwise(f"{name}_added", Call("add", (Ref(x), Ref(bb))))
    return mod


def _softcap_mod(cap: float) -> ScoreMod:
    # cap * tanh(x / cap), with tanh(y) = 2 / (1 + exp(-2y)) - 1
    def mod(b: GraphBuilder, x: str) -> str:
        inner = Call("exp", (Call("scale", (Ref(x), Const(-2.0 / cap))),))
        tanh = Call("sub", (Call("div", (Const(2.0), Call("add", (Const(1.0), inner)))), Const(1.0)))
        return b.pointwise("capped", Call("scale", (tanh, Const(float(cap)))))
    return mod


def _build(spec: AttentionSpec) -> BuiltVariant:
    n, dk = spec.seq, spec.head_dim
    b = GraphBuilder({"B": spec.batch, "M": n, "N": n, "D": dk, "Dv": dk}, spec.dtype)
    consts: dict[str, np.ndarray] = {}

    if spec.variant == "evoformer":
        b.dim("S", spec.rows)
        b.dim("H", spec.heads)
        lead = ("B", "S", "H")
        q = b.input("Q", lead + ("M", "D"))
        k = b.input("K", lead + ("N", "D"))
        v = b.input("V", lead + ("N", "Dv"))
        b.input("mask_bias", ("B", "S", "N"))
        b.input("pair_bias", ("B", "H", "M", "N"))
        gate = b.input("G", lead + ("M", "Dv"))
        mods = [_bias_mod("mask_bias", lead), _bias_mod("pair_bias", lead)]
        o = _softmax_attention(b, "", q, k, v, lead, dk, mods)
        sig = Call("div", (Const(1.0), Call("add", (Const(1.0), Call("exp", (Call("neg", (Ref(gate),)),))))))
        g = b.pointwise("gate", sig)
        res = b.pointwise("gated", Call("mul", (Ref(o), Ref(g))))
        b.output("out", res)
        return BuiltVariant(b.build(), consts)

    if spec.variant == "diffattn":
        b.dim("H", spec.heads)
        lead = ("B", "H")
        q0, q1 = (b.input(f"Q{i}", lead + ("M", "D")) for i in range(2))
        k0, k1 = (b.input(f"K{i}", lead + ("N", "D")) for i in range(2))
        v = b.input("V", lead + ("N", "Dv"))
        o0 = _softmax_attention(b, "a0_", q0, k0, v, lead, dk)
        o1 = _softmax_attention(b, "a1_", q1, k1, v, lead, dk)
        res = b.pointwise("diff", Call("sub", (Ref(o0), Call("scale", (Ref(o1), Const(float(spec.lambda_full)))))))
        b.output("out", res)
        return BuiltVariant(b.build(), consts)

    if spec.grouped:
        b.dim("G", spec.kv_heads)
        b.dim("R", spec.heads // spec.kv_heads)
        heads, kv_lead = ("G", "R"), ("B", "G")
    else:
        b.dim("H", spec.heads)
        heads, kv_lead = ("H",), ("B", "H")
    lead = ("B",) + heads
    q = b.input("Q", lead + ("M", "D"))
    k = b.input("K", kv_lead + ("N", "D"))
    v = b.input("V", kv_lead + ("N", "Dv"))
    mods: list[ScoreMod] = []
    if spec.variant in MASK_RULES:
        b.input("mask", ("M", "N"))
        consts["mask"] = spec.mask.matrix(n).astype(np.float64)
        mods.append(_mask_mod(lead))
    elif spec.variant == "alibi":
        b.input("alibi", heads + ("M", "N"))
        slopes = alibi_slopes(spec.heads).reshape([b.dims[h] for h in heads])
        rel = (np.arange(n)[None, :] - np.arange(n)[:, None]).astype(np.float64)
        consts["alibi"] = slopes[..., None, None] * rel
        mods.append(_bias_mod("alibi", lead))
    elif spec.variant == "softcap":
        mods.append(_softcap_mod(spec.softcap))
    o = _softmax_attention(b, "", q, k, v, lead, dk, mods)
    b.output("out", o)
    return BuiltVariant(b.build(), consts)


def build_variant(spec: AttentionSpec) -> TensorGraph:
    """Decomposed attention graph for ``spec``."""
    return _build(spec).graph


def constant_inputs(spec: AttentionSpec) -> dict[str, np.ndarray]:
    """Mask and bias tensors the variant's graph expects as fixed inputs."""
    return dict(_build(spec).constants)


def random_bindings(graph: TensorGraph, seed: int, constants: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Uniform [-1, 1] values for every non-constant input, drawn in graph order."""
    rng = np.random.default_rng(seed)
    constants = constants or {}
    out = {}
    for node in graph.nodes:
        if node.kind is not OpKind.INPUT:
            continue
        name = node.out.name
        out[name] = np.asarray(constants[name]) if name in constants else rng.uniform(-1.0, 1.0, graph.shape(name))
    return out


def build_twin_matmul(m: int = 512, n: int = 512, k: int = 64, p: int = 64, dtype: DType = DType.F64) -> TensorGraph:
    """``E = (A @ B) @ D`` with the inner product ``C`` as the fusion candidate."""
    b = GraphBuilder({"M": m, "N": n, "K": k, "P": p}, dtype)
    b.input("A", ("M", "K"))
    b.input("B", ("K", "N"))
    b.input("D", ("N", "P"))
    b.contract("C", "A", "B", ["K"], out=("M", "N"))
    b.contract("E", "C", "D", ["N"], out=("M", "P"))
    b.output("out", "E")
    return b.build()


def corpus(seqs=CORPUS_SEQ) -> list[tuple[str, AttentionSpec]]:
    """Deterministic desk-scale benchmark set."""
    out = []
    for n in seqs:
        for v in SCORE_VARIANTS:
            out.append((f"{v}-mha-n{n}", AttentionSpec(v, seq=n)))
            out.append((f"{v}-gqa-n{n}", AttentionSpec(v, heads=16, kv_heads=2, seq=n)))
        out.append((f"diffattn-n{n}", AttentionSpec("diffattn", seq=n)))
        out.append((f"evoformer-n{n}", AttentionSpec("evoformer", heads=4, seq=n)))
    return out


def corpus_entry(name: str) -> AttentionSpec:
    for key, spec in corpus():
        if key == name:
            return spec
    raise KeyError(f"no corpus entry named {name!r}")
