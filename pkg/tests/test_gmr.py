import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gmdg import gmr_core as G

from oracles import equalize_loops

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 12)), elements=finite))
def test_output_range_and_shape(x):
    g = G.gmr(x)
    assert g.values.shape == x.shape
    assert np.all((g.values >= 0) & (g.values <= 1))
    if np.any(g.values > 0):
        assert g.values.max() == 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 10), st.integers(3, 10)),
              elements=st.floats(0, 50, allow_nan=False)))
def test_equalize_agrees_with_loop_oracle(v):
    np.testing.assert_allclose(G.histogram_equalize(v), equalize_loops(v), rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 10.0]), st.sampled_from([-100.0, 0.0, 3.0]))
def test_affine_robustness_property(seed, a, b):
    x = np.random.default_rng(seed).normal(size=(16, 16))
    diff = np.abs(G.gmr_array(a * x + b) - G.gmr_array(x)).max()
    assert diff <= 1 / 256 + 1e-9


def test_translation_is_exact():
    x = np.random.default_rng(0).random((20, 20))
    np.testing.assert_array_equal(G.gmr_array(x + 7.0), G.gmr_array(x))


def test_provenance_tracks_input():
    x = np.random.default_rng(1).random((10, 10))
    a, b = G.gmr(x), G.gmr(x.copy())
    assert a.provenance == b.provenance
    assert G.gmr(x + 1e-3).provenance != a.provenance
    assert a.shape == (10, 10)


def test_stack_is_per_slice():
    x = np.random.default_rng(2).random((3, 9, 9))
    x[1] *= 1000
    out = G.gmr_stack(x)
    for k in range(3):
        np.testing.assert_array_equal(out[k], G.gmr_array(x[k]))


@pytest.mark.parametrize("bad", [np.zeros((2, 8)), np.zeros((8,)), np.full((4, 4), np.nan),
                                 np.full((4, 4), np.inf)])
def test_rejects_invalid_slices(bad):
    with pytest.raises(ValueError):
        G.gmr(bad)


def test_rejects_unknown_axis():
    with pytest.raises(ValueError):
        G.correlate_1d(np.zeros((4, 4)), "diagonal")
