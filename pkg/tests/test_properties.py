from __future__ import annotations

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchfuse.algebra import closed_form_prefix, run_online, run_stable
from sketchfuse.evaluate import eval_naive
from sketchfuse.executor import compare, execute, normwise_error
from sketchfuse.fusion import ComputationSketch, schedule, try_fuse_structural
from sketchfuse.grid import LogicalGrid, delinearize, linearize
from sketchfuse.variants import AttentionSpec, build_variant, constant_inputs, random_bindings

from conftest import softmax_graph

finite = st.floats(-10, 10, allow_nan=False)
DIMS = ["a", "b", "c", "d", "e"]


@given(arrays(np.float64, st.integers(1, 300), elements=finite))
def test_online_matches_stable(x):
    m1, d1 = run_online(x)
    m2, d2 = run_stable(x)
    assert m1 == m2
    assert compare(d1, d2)[1] <= 1e-12


@given(arrays(np.float64, st.integers(1, 100), elements=finite))
def test_closed_form_prefix(x):
    _, _, _, ds = run_online(x, trace=True)
    assert compare(closed_form_prefix(x), ds)[1] <= 1e-10


@given(st.lists(st.integers(1, 40), min_size=1, max_size=4))
def test_grid_bijection(shape):
    g = LogicalGrid.of(shape)
    ids = np.arange(g.total)
    coords = delinearize(g, ids)
    assert all(((c >= 0) & (c < t)).all() for c, t in zip(coords, shape))
    np.testing.assert_array_equal(linearize(g, coords), ids)


def _sketch(draw):
    names = draw(st.permutations(DIMS))
    k = draw(st.integers(0, 5))
    j = draw(st.integers(k, 5))
    return ComputationSketch.of(names[:k], names[k:j], {d: 4 for d in DIMS})


@given(st.data())
def test_structural_plans_respect_the_rule(data):
    prod, cons = _sketch(data.draw), _sketch(data.draw)
    plan = try_fuse_structural(prod, cons)
    if plan is None:
        return
    assert plan.sketch.p_names == cons.p_names
    assert set(plan.demoted_dims) <= set(cons.r_names)
    assert not set(prod.r_names) & set(cons.r_names)
    assert set(plan.sketch.r_names) >= set(cons.r_names)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 300), st.integers(1, 4), st.sampled_from([1, 7, 64, 128]), st.integers(0, 2**16))
def test_fused_softmax_matches_naive(n, rows, tile, seed):
    g = softmax_graph(n, rows)
    x = np.random.default_rng(seed).uniform(-10, 10, (rows, n))
    res = execute(schedule(g, tiles={"N": tile, "M": 1}), {"x": x})
    assert normwise_error(res.outputs["out"], eval_naive(g, {"x": x})["out"]) <= 1e-14


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["vanilla", "causal", "document", "alibi"]), st.integers(1, 200), st.integers(0, 1000))
def test_ragged_attention_sizes(variant, n, seed):
    spec = AttentionSpec(variant, heads=1, seq=n, head_dim=8, window=16, prefix=5, documents=3)
    g = build_variant(spec)
    bind = random_bindings(g, seed, constant_inputs(spec))
    out = execute(schedule(g, tiles={"M": 32, "N": 32}), bind).outputs["out"]
    err = normwise_error(out, eval_naive(g, bind)["out"])
    assert math.isfinite(err) and err <= 1e-5
