import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference
from spvit import uffn
from spvit.numerics import Var

seeds = st.integers(0, 2**31 - 1)


def random_ffn(rng, c, ratio):
    f = uffn.UffnParams.init(c, ratio, rng)
    for v in f.weights().values():
        v.value[...] = rng.standard_normal(v.shape) * 0.5
    f.theta.value[...] = rng.standard_normal(f.hidden)
    return f


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), seeds)
def test_gated_forward_matches_hidden_unit_loop(c, ratio, seed):
    rng = np.random.default_rng(seed)
    f = random_ffn(rng, c, ratio)
    X = rng.standard_normal((2, 3, c))
    gates = (rng.random(f.hidden) < 0.5).astype(float)
    out = uffn.uffn_forward(Var(X), f, gates, "search").value
    want = reference.ffn(X, f, np.flatnonzero(gates))
    np.testing.assert_allclose(out, want, atol=1e-10)


@pytest.mark.filterwarnings("ignore:all hidden dimensions pruned")
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), seeds)
def test_frozen_mode_equals_search_with_thresholded_gates(c, ratio, seed):
    rng = np.random.default_rng(seed)
    f = random_ffn(rng, c, ratio)
    X = Var(rng.standard_normal((4, c)))
    mask = (f.theta.value >= 0).astype(float)
    frozen = uffn.uffn_forward(X, f, None, "frozen").value
    np.testing.assert_allclose(frozen, uffn.uffn_forward(X, f, mask, "search").value, atol=1e-12)
    keep = uffn.select_dims(f.theta)
    np.testing.assert_array_equal(keep, np.flatnonzero(mask))
    m = uffn.materialize_ffn(f, keep)
    np.testing.assert_allclose(uffn.uffn_forward(X, m, None, "frozen").value, frozen, atol=1e-12)
    assert m.theta is None and m.hidden == keep.size


def test_all_dims_pruned_leaves_output_bias():
    rng = np.random.default_rng(0)
    f = random_ffn(rng, 4, 2)
    f.theta.value[...] = -1.0
    X = Var(rng.standard_normal((3, 4)))
    out = uffn.uffn_forward(X, f, None, "frozen").value
    np.testing.assert_allclose(out, np.broadcast_to(f.b_fc2.value, (3, 4)))
    with pytest.warns(UserWarning, match="pruned"):
        m = uffn.materialize_ffn(f, [])
    assert m.n_params() == 4


def test_sampled_dim_gates_straight_through():
    rng = np.random.default_rng(0)
    theta = Var(np.array([-3.0, 0.0, 3.0]), requires_grad=True)
    g = uffn.sample_dim_gates(theta, rng)
    assert set(np.unique(g.value)) <= {0.0, 1.0}
    g.sum().backward()
    p = 1 / (1 + np.exp(-theta.value))
    np.testing.assert_allclose(theta.grad, p * (1 - p))


def test_gate_count_must_match_hidden_width():
    f = random_ffn(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        uffn.uffn_forward(Var(np.zeros((1, 3))), f, np.ones(5), "search")


@given(st.integers(0, 512), st.integers(1, 128))
def test_alpha_prime(kept, c):
    assert uffn.alpha_prime(kept, c) * c == pytest.approx(kept)
