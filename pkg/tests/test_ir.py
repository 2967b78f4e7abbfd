from __future__ import annotations

import numpy as np
import pytest

from sketchfuse.evaluate import EvaluationError, eval_naive
from sketchfuse.ir import (
    Call,
    Const,
    DType,
    GraphBuilder,
    IRError,
    OpKind,
    OpNode,
    Ref,
    TensorGraph,
    TensorRef,
    eliminate_dead,
    lower_contract,
    validate,
)
from sketchfuse.variants import AttentionSpec, build_variant

from conftest import reference_softmax, softmax_graph


def test_vanilla_attention_graph_is_well_formed():
    assert validate(build_variant(AttentionSpec())) == []


def test_reduce_over_absent_dim_is_reported():
    g = TensorGraph(
        {"M": 2, "N": 3, "Q": 4},
        (
            OpNode("x", OpKind.INPUT, (), (TensorRef("x", ("M", "N"), DType.F64),)),
            OpNode("r", OpKind.REDUCE, ("x",), (TensorRef("r", ("M", "N"), DType.F64),), combiner="sum", dims=("Q",), init=0.0),
        ),
    )
    diags = validate(g)
    assert len(diags) == 1
    assert "Q" in diags[0].message


def test_cycle_is_reported():
    ref = lambda name: (TensorRef(name, ("M",), DType.F64),)
    g = TensorGraph(
        {"M": 2},
        (
            OpNode("a", OpKind.POINTWISE, ("b",), ref("a"), fn=Call("neg", (Ref("b"),))),
            OpNode("b", OpKind.POINTWISE, ("a",), ref("b"), fn=Call("neg", (Ref("a"),))),
        ),
    )
    diags = validate(g)
    assert [d.message for d in diags] == ["cycle"]
    with pytest.raises(IRError):
        g.topological()


def test_builder_rejects_unknown_dim_and_duplicates():
    b = GraphBuilder({"M": 2})
    b.input("x", ("M",))
    with pytest.raises(IRError):
        b.input("y", ("Z",))
    with pytest.raises(IRError):
        b.input("x", ("M",))
    with pytest.raises(IRError):
        b.contract("c", "x", "x", ["Q"])


def _matmul(a, b):
    g = GraphBuilder({"M": a.shape[0], "K": a.shape[1], "N": b.shape[1]}, DType.F64)
    g.input("A", ("M", "K"))
    g.input("B", ("K", "N"))
    g.contract("C", "A", "B", ["K"], out=("M", "N"))
    g.output("out", "C")
    return g.build()


def test_contract_identity_and_dot():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = eval_naive(_matmul(a, np.eye(2)), {"A": a, "B": np.eye(2)})["out"]
    np.testing.assert_array_equal(out, a)
    ones = np.ones((1, 4))
    dot = eval_naive(_matmul(ones, ones.T), {"A": ones, "B": ones.T})["out"]
    assert dot[0, 0] == 4.0


def test_lower_contract_matches_contraction(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
    g = _matmul(a, b)
    low = lower_contract(g, "C")
    assert validate(low) == []
    kinds = [n.kind for n in low.nodes if n.id.startswith("C")]
    assert OpKind.REDUCE in kinds and OpKind.POINTWISE in kinds
    np.testing.assert_allclose(eval_naive(low, {"A": a, "B": b})["out"], a @ b, rtol=1e-13)


def test_softmax_of_zeros_is_uniform():
    out = eval_naive(softmax_graph(4, 1), {"x": np.zeros((1, 4))})["out"]
    np.testing.assert_array_equal(out, [[0.25] * 4])


def test_softmax_matches_reference(rng):
    x = rng.uniform(-10, 10, (3, 8))
    np.testing.assert_allclose(eval_naive(softmax_graph(), {"x": x})["out"], reference_softmax(x), rtol=1e-14)


def test_fully_masked_row_is_uniform():
    spec = AttentionSpec("causal", heads=1, seq=4, head_dim=2, dtype=DType.F64)
    g = build_variant(spec)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 1, 4, 2))
    bind = {"Q": rng.normal(size=(1, 1, 4, 2)), "K": rng.normal(size=(1, 1, 4, 2)), "V": v, "mask": np.ones((4, 4))}
    out = eval_naive(g, bind)["out"]
    np.testing.assert_allclose(out[0, 0], np.broadcast_to(v[0, 0].mean(axis=0), (4, 2)), rtol=1e-14)


def test_hand_computed_two_by_two_attention():
    spec = AttentionSpec(heads=1, seq=2, head_dim=2, dtype=DType.F64)
    eye = np.eye(2).reshape(1, 1, 2, 2)
    out = eval_naive(build_variant(spec), {"Q": eye, "K": eye, "V": eye})["out"][0, 0]
    # scores are I/sqrt(2); each row keeps weight sigmoid(1/sqrt(2)) on its own key
    s = 1.0 / (1.0 + np.exp(-1.0 / np.sqrt(2.0)))
    np.testing.assert_allclose(out, [[s, 1 - s], [1 - s, s]], rtol=1e-15)


def test_binding_errors_name_the_input():
    g = softmax_graph()
    with pytest.raises(EvaluationError, match="x"):
        eval_naive(g, {})
    with pytest.raises(EvaluationError, match="extent"):
        eval_naive(g, {"x": np.zeros((2, 2))})


def test_f32_inputs_are_rounded():
    g = softmax_graph(dtype=DType.F32)
    x = np.full((3, 8), 0.1)
    out = eval_naive(g, {"x": x}, keep_all=True)
    assert out["x"][0, 0] == np.float64(np.float32(0.1))


def test_eliminate_dead_keeps_inputs_and_live_ops():
    b = GraphBuilder({"M": 2}, DType.F64)
    b.input("x", ("M",))
    b.input("unused", ("M",))
    b.pointwise("dead", Call("neg", (Ref("x"),)))
    b.pointwise("live", Call("scale", (Ref("x"), Const(2.0))))
    b.output("out", "live")
    ids = [n.id for n in eliminate_dead(b.build()).nodes]
    assert ids == ["x", "unused", "live", "out"]
