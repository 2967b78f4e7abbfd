from __future__ import annotations

import numpy as np
import pytest

from sketchfuse.ir import Call, DType, GraphBuilder, Ref, TensorGraph


def softmax_graph(n: int = 8, rows: int = 3, dtype: DType = DType.F64) -> TensorGraph:
    """Row softmax written as max, shift, exp, sum and divide."""
    b = GraphBuilder({"M": rows, "N": n}, dtype)
    b.input("x", ("M", "N"))
    b.reduce("mx", "x", "max", ["N"])
    b.broadcast("mx_b", "mx", ["N"], out=("M", "N"))
    b.pointwise("d", Call("sub", (Ref("x"), Ref("mx_b"))))
    b.pointwise("e", Call("exp", (Ref("d"),)))
    b.reduce("s", "e", "sum", ["N"])
    b.broadcast("s_b", "s", ["N"], out=("M", "N"))
    b.pointwise("p", Call("div", (Ref("e"), Ref("s_b"))))
    b.output("out", "p")
    return b.build()


def reference_softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
