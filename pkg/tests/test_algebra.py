from __future__ import annotations

import math

import numpy as np
import pytest

from sketchfuse.algebra import (
    SOFTMAX,
    EmptyReductionError,
    ReductionAlgebra,
    check_algebra,
    closed_form_prefix,
    get_algebra,
    online_step,
    run_online,
    run_stable,
    safe_sub,
)

BROKEN = ReductionAlgebra("broken", np.add, np.subtract, np.negative, 0.0, 1.0, np.exp)


def test_softmax_axioms_on_small_samples():
    rep = check_algebra(SOFTMAX, [-1.0, 0.0, 0.5, 3.0])
    assert rep.ok
    assert rep["homomorphism"].residual <= 1e-12


def test_hom_of_zero_is_exactly_one():
    assert SOFTMAX.hom(SOFTMAX.zero) == 1.0


def test_broken_product_fails_distributivity():
    rep = check_algebra(BROKEN, [-1.0, 0.0, 0.5, 3.0])
    assert not rep.ok
    assert not rep["distributive"].passed


def test_report_round_trips_through_dict():
    rep = check_algebra(SOFTMAX, [0.0, 1.0])
    assert type(rep).from_dict(rep.to_dict()) == rep


def test_registry():
    assert get_algebra("softmax") is SOFTMAX
    with pytest.raises(KeyError):
        get_algebra("nope")


@pytest.mark.parametrize("run", [run_stable, run_online])
def test_known_reductions(run):
    assert run([0.0, 0.0]) == (0.0, 2.0)
    assert run([4.5]) == (4.5, 1.0)
    m, d = run([1.0, 2.0, 3.0])
    assert m == 3.0
    assert d == pytest.approx(math.fsum([math.exp(-2), math.exp(-1), 1.0]), rel=1e-15)


@pytest.mark.parametrize("run", [run_stable, run_online, closed_form_prefix])
def test_empty_input_is_an_error(run):
    with pytest.raises(EmptyReductionError):
        run([])


def test_ascending_input_rescales_every_step():
    x = np.arange(1.0, 11.0)
    m, d, ms, ds = run_online(x, trace=True)
    np.testing.assert_array_equal(ms, x)
    assert (m, d) == pytest.approx(run_stable(x), rel=1e-15)


def test_descending_input_never_rescales():
    x = np.arange(10.0, 0.0, -1.0)
    m, d = SOFTMAX.stat_init, SOFTMAX.zero
    m, d = online_step(SOFTMAX, m, d, x[0])
    for xj in x[1:]:
        m_new = SOFTMAX.stat(m, xj)
        assert SOFTMAX.correction(m, m_new) == 1.0
        m, d = online_step(SOFTMAX, m, d, xj)
    assert m == 10.0


def test_closed_form_prefix_equals_online_trace(rng):
    x = rng.uniform(-10, 10, 64)
    _, _, _, ds = run_online(x, trace=True)
    np.testing.assert_allclose(closed_form_prefix(x), ds, rtol=1e-10)


def test_batched_rows(rng):
    x = rng.uniform(-5, 5, (4, 33))
    m, d = run_online(x)
    ms, dsum = run_stable(x)
    np.testing.assert_allclose(d, dsum, rtol=1e-13)
    np.testing.assert_array_equal(m, ms)


def test_all_masked_sequence_is_uniform():
    assert run_online([-np.inf] * 3) == (-np.inf, 3.0)
    assert run_stable([-np.inf] * 3) == (-np.inf, 3.0)


def test_safe_sub_treats_equal_infinities_as_zero():
    np.testing.assert_array_equal(safe_sub([-np.inf, np.inf, 2.0], [-np.inf, np.inf, 0.5]), [0.0, 0.0, 1.5])
