from __future__ import annotations

import numpy as np
import pytest

from sketchfuse.evaluate import eval_naive
from sketchfuse.executor import execute, normwise_error
from sketchfuse.fusion import schedule
from sketchfuse.ir import DType, IRError, validate
from sketchfuse.variants import (
    VARIANTS,
    AttentionSpec,
    MaskSpec,
    alibi_slopes,
    build_variant,
    constant_inputs,
    corpus,
    corpus_entry,
    random_bindings,
)

from conftest import reference_softmax


def _run(spec, seed=0, bind=None):
    g = build_variant(spec)
    bind = bind or random_bindings(g, seed, constant_inputs(spec))
    return execute(schedule(g), bind).outputs["out"], bind


def test_corpus_contents():
    entries = dict(corpus())
    assert len(entries) == 3 * (7 * 2 + 2)
    gqa = entries["vanilla-gqa-n256"]
    assert (gqa.heads, gqa.kv_heads) == (16, 2)
    assert entries["sliding_window-mha-n512"].window == 256
    assert entries["prefix_lm-mha-n512"].prefix == 256
    assert entries["evoformer-n1024"].heads == 4
    assert {s.seq for s in entries.values()} == {256, 512, 1024}
    assert corpus() == corpus()
    assert corpus_entry("diffattn-n512").variant == "diffattn"


@pytest.mark.parametrize("name", [n for n, _ in corpus((256,))])
def test_corpus_graphs_validate_and_schedule(name):
    g = build_variant(corpus_entry(name))
    assert validate(g) == []
    assert len(schedule(g)) >= 1


def test_spec_errors():
    with pytest.raises(IRError):
        AttentionSpec("nope")
    with pytest.raises(IRError):
        AttentionSpec(heads=6, kv_heads=4)
    with pytest.raises(IRError):
        AttentionSpec(seq=0)
    with pytest.raises(IRError):
        MaskSpec("strided")


def test_mask_rules():
    causal = MaskSpec("causal").matrix(4)
    assert not causal[2, 2] and causal[1, 2]
    win = MaskSpec("sliding_window", window=2).matrix(6)
    assert [int(i) for i in np.flatnonzero(~win[5])] == [3, 4, 5]
    pre = MaskSpec("prefix_lm", prefix=2).matrix(4)
    assert not pre[0, 1] and pre[0, 2] and not pre[3, 3]
    doc = MaskSpec("document", documents=12)
    assert len(doc.boundaries(256)) == 12
    m = doc.matrix(24)
    assert not m[0, 1] and m[1, 2]


def test_alibi_slopes_are_geometric():
    s = alibi_slopes(8)
    np.testing.assert_allclose(s, 2.0 ** -np.arange(1, 9))


def test_sliding_window_rows_match_windowed_softmax():
    spec = AttentionSpec("sliding_window", heads=1, seq=512, head_dim=16, window=256, dtype=DType.F64)
    out, bind = _run(spec, seed=4)
    q, k, v = bind["Q"][0, 0], bind["K"][0, 0], bind["V"][0, 0]
    for i in (0, 255, 300, 511):
        lo = max(0, i - 256)
        s = q[i] @ k[lo:i + 1].T / 4.0
        np.testing.assert_allclose(out[0, 0, i], reference_softmax(s) @ v[lo:i + 1], rtol=1e-10, atol=1e-13)


def test_causal_rows_ignore_later_keys():
    spec = AttentionSpec("causal", heads=2, seq=256, head_dim=16, dtype=DType.F64)
    out, bind = _run(spec, seed=1)
    i = 100
    bent = dict(bind)
    for name in ("K", "V"):
        arr = bind[name].copy()
        arr[..., i + 1:, :] += np.random.default_rng(9).normal(size=arr[..., i + 1:, :].shape)
        bent[name] = arr
    out2, _ = _run(spec, bind=bent)
    np.testing.assert_array_equal(out[..., : i + 1, :], out2[..., : i + 1, :])
    assert not np.array_equal(out[..., i + 1:, :], out2[..., i + 1:, :])


def test_huge_softcap_approaches_vanilla():
    spec = AttentionSpec("softcap", heads=2, seq=256, softcap=1e6, dtype=DType.F64)
    capped, bind = _run(spec, seed=2)
    plain, _ = _run(AttentionSpec(heads=2, seq=256, dtype=DType.F64), bind={k: bind[k] for k in ("Q", "K", "V")})
    assert normwise_error(capped, plain) <= 1e-4


def test_grouped_query_with_one_head_per_group_equals_multi_head():
    mha, bind = _run(AttentionSpec(heads=4, seq=256), seed=3)
    gqa, _ = _run(AttentionSpec(heads=4, kv_heads=4, seq=256), bind={
        "Q": bind["Q"].reshape(1, 4, 1, 256, 64), "K": bind["K"], "V": bind["V"]})
    np.testing.assert_array_equal(gqa.reshape(mha.shape), mha)


def test_grouped_query_seeds_draw_the_same_values():
    g_mha = build_variant(AttentionSpec(heads=4, seq=256))
    g_gqa = build_variant(AttentionSpec(heads=4, kv_heads=4, seq=256))
    a, b = random_bindings(g_mha, 7), random_bindings(g_gqa, 7)
    for name in ("Q", "K", "V"):
        np.testing.assert_array_equal(a[name].ravel(), b[name].ravel())


def test_differential_attention_without_second_branch():
    spec = AttentionSpec("diffattn", heads=2, seq=256, lambda_full=0.0, dtype=DType.F64)
    out, bind = _run(spec, seed=6)
    single, _ = _run(AttentionSpec(heads=2, seq=256, dtype=DType.F64), bind={"Q": bind["Q0"], "K": bind["K0"], "V": bind["V"]})
    np.testing.assert_array_equal(out, single)


def test_evoformer_biases_reach_the_scores():
    spec = AttentionSpec("evoformer", heads=2, rows=2, seq=128, head_dim=16, dtype=DType.F64)
    g = build_variant(spec)
    assert g.value("mask_bias").dims == ("B", "S", "N")
    assert g.value("pair_bias").dims == ("B", "H", "M", "N")
    bind = random_bindings(g, 0)
    base = eval_naive(g, bind)["out"]
    shifted = dict(bind, mask_bias=bind["mask_bias"] + 3.0)  # a per-row constant cancels in softmax
    np.testing.assert_allclose(eval_naive(g, shifted)["out"], base, rtol=1e-12, atol=1e-15)
    bent = dict(bind, pair_bias=bind["pair_bias"] * 2.0)
    assert not np.allclose(eval_naive(g, bent)["out"], base)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_matches_oracle_at_small_size(variant):
    spec = AttentionSpec(variant, heads=2, seq=256, head_dim=16, window=64, prefix=32, documents=5, dtype=DType.F64)
    out, bind = _run(spec, seed=11)
    ref = eval_naive(build_variant(spec), bind)["out"]
    assert normwise_error(out, ref) <= 1e-10
