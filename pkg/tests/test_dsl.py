from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from sketchfuse.dsl import DslError, format_program, parse_program
from sketchfuse.evaluate import eval_naive
from sketchfuse.fusion import schedule
from sketchfuse.ir import DType, IRError, validate
from sketchfuse.semantic import try_fuse_semantic
from sketchfuse.variants import build_twin_matmul, build_variant, corpus, corpus_entry, random_bindings

PROGRAMS = Path(__file__).resolve().parent.parent / "programs"

SOFTMAX_TEXT = """\
# row softmax
dtype f64
dim M = 2
dim N = 3
x = input() dims=[M, N]
mx = reduce_max(x) dims=[N]
mb = broadcast(mx) dims=[N] out=[M, N]
e = exp(sub(x, mb))
s = reduce_sum(e) dims=[N]
p = div(e, broadcast_s)   # forward reference is a parse error
"""


@pytest.mark.parametrize("name", [n for n, _ in corpus((256,))])
def test_corpus_round_trips_through_text(name):
    g = build_variant(corpus_entry(name))
    back = parse_program(format_program(g))
    assert back.nodes == g.nodes and back.dims == g.dims


def test_twin_matmul_file_matches_builder():
    g = parse_program((PROGRAMS / "twin_matmul.sf").read_text())
    assert g.nodes == build_twin_matmul().nodes
    assert len(schedule(g)) == 1


def test_attention_file_is_one_kernel():
    g = parse_program((PROGRAMS / "attention.sf").read_text())
    assert validate(g) == [] and len(schedule(g)) == 1


def test_nested_expressions_and_literals():
    g = parse_program("dim M = 3\nx = input(f64) dims=[M]\ny = where(x, -inf, add(x, 1.5e0))\nout = output(y)\n")
    out = eval_naive(g, {"x": np.array([0.0, 1.0, 2.0])})["out"]
    np.testing.assert_array_equal(out, [1.5, -np.inf, -np.inf])


def test_dtype_directive_and_explicit_input_dtype():
    g = parse_program("dtype f64\ndim M = 2\na = input() dims=[M]\nb = input(f32) dims=[M]\n")
    assert g.value("a").dtype is DType.F64 and g.value("b").dtype is DType.F32


@pytest.mark.parametrize("text, line", [
    ("dim M = x", 1),
    ("dim M = 4\na = input() dims=[Q]", 2),
    ("dim M = 4\na = input() dims=[M]\nq = foo(a)", 3),
    ("dim M = 4\na = input() dims=[M]\nb = exp(", 3),
    ("dim M = 4\na = input() dims=[M]\nb = contract(a) dims=[M]", 3),
    ("dim M = 4\na = input() dims=[M]\n\n# note\nb = reduce_sum(a)", 5),
    ("what is this", 1),
    ("dim M = 0", 1),
    (SOFTMAX_TEXT, 10),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(DslError) as info:
        parse_program(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_line_map():
    lines = {}
    parse_program("dim M = 2\n\nx = input() dims=[M]\n# c\ny = neg(x)\n", lines)
    assert lines == {"x": 3, "y": 5}


def test_rewritten_graph_has_no_text_form():
    g = try_fuse_semantic(build_variant(corpus_entry("vanilla-mha-n256"))).graph
    with pytest.raises(IRError):
        format_program(g)


def test_parsed_graph_evaluates_like_builder():
    g = build_variant(corpus_entry("alibi-mha-n256"))
    back = parse_program(format_program(g))
    bind = random_bindings(g, 0)
    np.testing.assert_array_equal(eval_naive(back, bind)["out"], eval_naive(g, bind)["out"])
