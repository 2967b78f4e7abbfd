"""Ring-and-homomorphism view of two-pass reductions.

A two-pass reduction first computes a running statistic (``max``) over a
sequence and then folds ``E(x - m_final)`` with the ring's addition.  When
``E`` maps ring addition to ring multiplication, the dependency on the final
statistic can be replaced by a running statistic plus a correction factor
``E(m_old - m_new)``, giving a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Binary = Callable[[np.ndarray, np.ndarray], np.ndarray]
Unary = Callable[[np.ndarray], np.ndarray]


class EmptyReductionError(ValueError):
    pass


def safe_sub(a, b):
    """``a - b`` with ``x - x = 0`` for equal infinities.

    Fully masked rows have score and running max both at ``-inf``; treating the
    difference as zero makes every entry contribute ``E(0) = 1`` so the row
    normalises to a uniform distribution instead of NaN.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    with np.errstate(invalid="ignore"):
        diff = a - b
    return np.where(a == b, diff.dtype.type(0), diff)


@dataclass(frozen=True)
class ReductionAlgebra:
    name: str
    oplus: Binary
    otimes: Binary
    oneg: Unary
    zero: float
    one: float
    hom: Unary
    # graph-level spelling used by the pattern matcher
    oplus_combiner: str = "sum"
    hom_op: str = "exp"
    stat_combiner: str = "max"
    stat: Binary = np.maximum
    stat_init: float = -math.inf
    ominus: Binary | None = None
    commutative: bool = True

    def sub(self, a, b):
        """``a ⊕ (⊖b)``."""
        if self.ominus is not None:
            return self.ominus(a, b)
        return self.oplus(a, self.oneg(b))

    def correction(self, m_old, m_new):
        return self.hom(self.sub(m_old, m_new))


SOFTMAX = ReductionAlgebra(
    name="softmax",
    oplus=np.add,
    otimes=np.multiply,
    oneg=np.negative,
    zero=0.0,
    one=1.0,
    hom=np.exp,
    ominus=safe_sub,
)

_REGISTRY: dict[str, ReductionAlgebra] = {SOFTMAX.name: SOFTMAX}


def register_algebra(alg: ReductionAlgebra) -> ReductionAlgebra:
    _REGISTRY[alg.name] = alg
    return alg


def get_algebra(name: str) -> ReductionAlgebra:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"no reduction algebra named {name!r}") from None


def registered_algebras() -> list[str]:
    return sorted(_REGISTRY)


# -- axiom checking -----------------------------------------------------------

@dataclass(frozen=True)
class AxiomResult:
    name: str
    passed: bool
    residual: float


@dataclass(frozen=True)
class AlgebraReport:
    algebra: str
    tol: float
    results: tuple[AxiomResult, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name: str) -> AxiomResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "algebra": self.algebra,
            "tol": self.tol,
            "ok": self.ok,
            "axioms": {r.name: {"passed": r.passed, "residual": r.residual} for r in self.results},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlgebraReport":
        results = tuple(AxiomResult(k, v["passed"], v["residual"]) for k, v in d["axioms"].items())
        return cls(d["algebra"], d["tol"], results)


def _residual(lhs, rhs) -> float:
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
        res = np.abs(lhs - rhs) / scale
    res = np.where(lhs == rhs, 0.0, res)
    if np.isnan(res).any():
        return math.inf
    return float(res.max(initial=0.0))


def check_algebra(alg: ReductionAlgebra, samples, tol: float = 1e-12) -> AlgebraReport:
    """Check the ring axioms and the homomorphism law on sampled values.

    Residuals are relative to ``max(1, |lhs|, |rhs|)``; every triple of
    samples is tried for the three-operand axioms.
    """
    s = np.asarray(list(samples), dtype=np.float64)
    if s.size == 0:
        raise ValueError("samples must be nonempty")
    a = s[:, None, None]
    b = s[None, :, None]
    c = s[None, None, :]
    a1 = s
    zero = np.float64(alg.zero)
    one = np.float64(alg.one)
    E, add, mul, neg = alg.hom, alg.oplus, alg.otimes, alg.oneg

    with np.errstate(over="ignore", invalid="ignore"):
        checks = {
            "oplus_associative": _residual(add(add(a, b), c), add(a, add(b, c))),
            "oplus_identity": max(_residual(add(a1, zero), a1), _residual(add(zero, a1), a1)),
            "oplus_inverse": max(_residual(add(a1, neg(a1)), zero + 0 * a1), _residual(add(neg(a1), a1), zero + 0 * a1)),
            "otimes_associative": _residual(mul(mul(a, b), c), mul(a, mul(b, c))),
            "otimes_identity": max(_residual(mul(a1, one), a1), _residual(mul(one, a1), a1)),
            "distributive": max(
                _residual(mul(add(a, b), c), add(mul(a, c), mul(b, c))),
                _residual(mul(c, add(a, b)), add(mul(c, a), mul(c, b))),
            ),
            "homomorphism": _residual(E(add(a[..., 0], b[..., 0])), mul(E(a[..., 0]), E(b[..., 0]))),
            "hom_zero": _residual(E(zero), one),
        }
    results = tuple(AxiomResult(k, bool(v <= tol), float(v)) for k, v in checks.items())
    return AlgebraReport(alg.name, tol, results)


# -- sequence reductions --------------------------------------------------------

def _as_sequence(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise EmptyReductionError("empty reduction")
    return arr


def run_stable(x, alg: ReductionAlgebra = SOFTMAX, accum=np.float64):
    """Two serial passes: the statistic first, then the shifted ⊕-fold.

    ``x`` may carry leading batch axes; the reduction runs over the last one.
    """
    arr = _as_sequence(x).astype(accum)
    n = arr.shape[-1]
    m = np.full(arr.shape[:-1], alg.stat_init, dtype=accum)
    for k in range(n):
        m = alg.stat(m, arr[..., k])
    d = np.full(arr.shape[:-1], alg.zero, dtype=accum)
    for j in range(n):
        d = alg.oplus(d, alg.hom(alg.sub(arr[..., j], m)))
    return _unwrap(m), _unwrap(d)


def online_step(alg: ReductionAlgebra, m, d, xj, *, flip_correction: bool = False):
    """One element of the online recurrence; returns the new ``(m, d)``."""
    m_new = alg.stat(m, xj)
    corr = alg.correction(m_new, m) if flip_correction else alg.correction(m, m_new)
    d_new = alg.oplus(alg.otimes(d, corr), alg.hom(alg.sub(xj, m_new)))
    return m_new, d_new


def run_online(x, alg: ReductionAlgebra = SOFTMAX, accum=np.float64, *, trace: bool = False):
    """Single pass with a running statistic and a rescaled running fold.

    With ``trace=True`` also returns the per-step ``m`` and ``d`` sequences
    (shape ``(..., N)``).
    """
    arr = _as_sequence(x).astype(accum)
    n = arr.shape[-1]
    m = np.full(arr.shape[:-1], alg.stat_init, dtype=accum)
    d = np.full(arr.shape[:-1], alg.zero, dtype=accum)
    ms, ds = [], []
    for j in range(n):
        m, d = online_step(alg, m, d, arr[..., j])
        if trace:
            ms.append(m)
            ds.append(d)
    if trace:
        return _unwrap(m), _unwrap(d), np.stack(ms, axis=-1), np.stack(ds, axis=-1)
    return _unwrap(m), _unwrap(d)


def closed_form_prefix(x, alg: ReductionAlgebra = SOFTMAX, accum=np.float64) -> np.ndarray:
    """``(⊕_{i<=j} E(x_i)) ⊗ E(⊖ m_j)`` for every prefix ``j``.

    Written with the ring operations directly, independent of the recurrence.
    """
    arr = _as_sequence(x).astype(accum)
    n = arr.shape[-1]
    out = np.empty_like(arr)
    fold = np.full(arr.shape[:-1], alg.zero, dtype=accum)
    m = np.full(arr.shape[:-1], alg.stat_init, dtype=accum)
    for j in range(n):
        fold = alg.oplus(fold, alg.hom(arr[..., j]))
        m = alg.stat(m, arr[..., j])
        out[..., j] = alg.otimes(fold, alg.hom(alg.oneg(m)))
    return out


def _unwrap(v):
    return float(v) if np.ndim(v) == 0 else v
