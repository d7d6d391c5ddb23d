"""Tests for the vector primitives, RNG streams, and the trace recorder."""

import math

import numpy as np
import pytest

from parseconf import nncore
from parseconf.nncore import (
    LstmParams,
    RngStream,
    TracedGraph,
    affine,
    derive_seed,
    dropout_mask,
    gaussian_perturb,
    lstm_step,
    sigmoid,
    softmax,
)


class TestScalarFunctions:
    def test_sigmoid_closed_form(self):
        # sigmoid(ln 3) = 1 / (1 + 1/3) = 3/4
        np.testing.assert_allclose(sigmoid(np.array([np.log(3.0)])), [0.75], rtol=1e-12)
        np.testing.assert_allclose(sigmoid(np.array([0.0])), [0.5], rtol=0)

    def test_sigmoid_symmetry(self):
        x = np.linspace(-8, 8, 33)
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), np.ones_like(x), rtol=1e-12)

    def test_sigmoid_extreme_inputs_finite(self):
        out = sigmoid(np.array([-1000.0, 1000.0]))
        assert out[0] == 0.0
        assert out[1] == 1.0

    def test_softmax_closed_form(self):
        # softmax([ln 1, ln 3]) = [1/4, 3/4]
        np.testing.assert_allclose(softmax(np.array([np.log(1.0), np.log(3.0)])),
                                   [0.25, 0.75], rtol=1e-12)

    def test_softmax_constant_vector_uniform(self):
        np.testing.assert_array_equal(softmax(np.full(4, 7.3)), np.full(4, 0.25))

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=12)
        np.testing.assert_allclose(softmax(x), softmax(x + 123.0), rtol=1e-12)

    def test_softmax_large_inputs_no_overflow(self):
        out = softmax(np.array([1000.0, 999.0]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0, rtol=1e-15)

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            softmax(np.array([0.0, np.nan]))


class TestAffine:
    def test_identity(self):
        x = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(affine(np.eye(3), x), x)

    def test_with_bias(self):
        W = np.array([[1.0, 2.0], [0.0, -1.0]])
        out = affine(W, np.array([3.0, 4.0]), np.array([10.0, 20.0]))
        np.testing.assert_allclose(out, [21.0, 16.0], rtol=0)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            affine(np.eye(3), np.zeros(4))
        with pytest.raises(ValueError):
            affine(np.eye(3), np.zeros(3), np.zeros(2))


class TestLstmStep:
    def test_zero_params_zero_state(self):
        params = LstmParams(W=np.zeros((4, 2)), b=np.zeros(4))
        h, c = lstm_step(np.zeros(1), np.zeros(1), np.zeros(1), params)
        np.testing.assert_array_equal(h, [0.0])
        np.testing.assert_array_equal(c, [0.0])

    def test_hand_worked_one_unit(self):
        # Zero weights, biases chosen so i = f = o = 1/2 and g = 0.8:
        # c = 1/2 * 0.4 + 1/2 * 0.8 = 0.6, h = 1/2 * tanh(0.6).
        b = np.array([0.0, 0.0, 0.0, np.arctanh(0.8)])
        params = LstmParams(W=np.zeros((4, 3)), b=b)
        h, c = lstm_step(np.array([9.0]), np.array([0.4]), np.array([7.0, -7.0]), params)
        np.testing.assert_allclose(c, [0.6], rtol=1e-12)
        np.testing.assert_allclose(h, [0.5 * math.tanh(0.6)], rtol=1e-12)

    def test_forget_gate_saturated_keeps_cell(self):
        # Huge forget bias, huge negative input bias: c_new = prev_c exactly.
        b = np.array([-1000.0, 1000.0, 0.0, 0.0])
        params = LstmParams(W=np.zeros((4, 3)), b=b)
        prev_c = np.array([0.37])
        _, c = lstm_step(np.zeros(1), prev_c, np.zeros(2), params)
        np.testing.assert_array_equal(c, prev_c)

    def test_state_dim_mismatch_raises(self):
        params = LstmParams(W=np.zeros((8, 3)), b=np.zeros(8))
        with pytest.raises(ValueError):
            lstm_step(np.zeros(1), np.zeros(1), np.zeros(1), params)


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = RngStream(1234), RngStream(1234)
        np.testing.assert_array_equal(a.normal(size=50), b.normal(size=50))
        np.testing.assert_array_equal(a.random(size=50), b.random(size=50))

    def test_different_seeds_differ(self):
        assert not np.array_equal(RngStream(1).normal(size=20), RngStream(2).normal(size=20))

    def test_counter_tracks_draws(self):
        s = RngStream(0)
        s.normal(size=3)
        s.random(size=3)
        assert s.counter == 2

    def test_derive_seed_is_stable_and_label_sensitive(self):
        assert derive_seed(7, "train") == derive_seed(7, "train")
        assert derive_seed(7, "train") != derive_seed(7, "test")
        assert derive_seed(7, "train") != derive_seed(8, "train")

    def test_derived_streams_reproduce(self):
        a = RngStream(99).derive("noise", 3)
        b = RngStream(99).derive("noise", 3)
        np.testing.assert_array_equal(a.normal(size=10), b.normal(size=10))

    def test_choice_index_distribution(self):
        rng = RngStream(5)
        probs = np.array([0.2, 0.5, 0.3])
        draws = np.array([rng.choice_index(probs) for _ in range(20000)])
        freq = np.bincount(draws, minlength=3) / len(draws)
        np.testing.assert_allclose(freq, probs, atol=0.02)


class TestPerturbations:
    def test_gaussian_sigma_zero_is_identity(self):
        v = np.array([1.0, -2.0, 0.25])
        rng = RngStream(0)
        for mode in ("additive", "multiplicative"):
            np.testing.assert_array_equal(gaussian_perturb(v, 0.0, mode, rng), v)

    def test_gaussian_additive_shifts(self):
        v = np.zeros(1000)
        out = gaussian_perturb(v, 0.5, "additive", RngStream(3))
        assert abs(out.std() - 0.5) < 0.05
        assert abs(out.mean()) < 0.05

    def test_gaussian_multiplicative_scales_with_value(self):
        # v + v*g: zero entries stay exactly zero, unit entries get unit-scaled noise.
        v = np.concatenate([np.zeros(500), np.ones(500)])
        out = gaussian_perturb(v, 0.1, "multiplicative", RngStream(4))
        np.testing.assert_array_equal(out[:500], np.zeros(500))
        assert abs(out[500:].std() - 0.1) < 0.02

    def test_gaussian_deterministic_under_seed(self):
        v = np.linspace(-1, 1, 32)
        a = gaussian_perturb(v, 0.05, "additive", RngStream(11))
        b = gaussian_perturb(v, 0.05, "additive", RngStream(11))
        np.testing.assert_array_equal(a, b)

    def test_gaussian_rejects_bad_args(self):
        with pytest.raises(ValueError):
            gaussian_perturb(np.zeros(2), -0.1, "additive", RngStream(0))
        with pytest.raises(ValueError):
            gaussian_perturb(np.zeros(2), 0.1, "divisive", RngStream(0))

    def test_dropout_zero_rate_all_ones(self):
        np.testing.assert_array_equal(dropout_mask(0.0, 64, RngStream(0)), np.ones(64))

    def test_dropout_mask_statistics(self):
        mask = dropout_mask(0.5, 100000, RngStream(21))
        zero_frac = np.mean(mask == 0.0)
        assert abs(zero_frac - 0.5) < 0.01
        # Inverted scaling: surviving entries are exactly 1/(1-p) and the
        # mask mean is close to one, so expectations are preserved.
        assert set(np.unique(mask)) == {0.0, 2.0}
        assert abs(mask.mean() - 1.0) < 0.01

    def test_dropout_rejects_rate_one(self):
        with pytest.raises(ValueError):
            dropout_mask(1.0, 8, RngStream(0))


class TestTracedGraph:
    def _small_graph(self):
        g = TracedGraph()
        x = g.leaf(np.array([1.0, 2.0]), tag=("input", 0))
        y = g.leaf(np.array([3.0, -1.0]), tag=("input", 1))
        s = g.add(x, y)
        d = g.sub(x, y)
        m = g.mul(s, d)
        W = np.array([[1.0, 0.5], [-0.5, 2.0]])
        a = g.affine(W, m, b=np.array([0.1, -0.1]))
        p = g.pointwise("tanh", a)
        sm = g.softmax(p)
        cat = g.concat(sm, d)
        sel = g.select(cat, [0, 3])
        sc = g.scalar_mul(2.5, sel)
        return g, sc

    def test_values_match_numpy(self):
        g, out = self._small_graph()
        x = np.array([1.0, 2.0])
        y = np.array([3.0, -1.0])
        m = (x + y) * (x - y)
        W = np.array([[1.0, 0.5], [-0.5, 2.0]])
        p = np.tanh(W @ m + np.array([0.1, -0.1]))
        sm = np.exp(p - p.max())
        sm = sm / sm.sum()
        expected = 2.5 * np.concatenate([sm, x - y])[[0, 3]]
        np.testing.assert_allclose(g.value(out), expected, rtol=1e-12)

    def test_replay_passes_and_detects_tampering(self):
        g, _ = self._small_graph()
        g.replay()
        g.nodes[4].value[0] += 1e-9
        with pytest.raises(AssertionError):
            g.replay()

    def test_nodes_are_topologically_ordered(self):
        g, _ = self._small_graph()
        for node in g.nodes:
            assert all(i < node.idx for i in node.inputs)

    def test_consumers_inverse_of_inputs(self):
        g, _ = self._small_graph()
        cons = g.consumers()
        for node in g.nodes:
            for i in node.inputs:
                assert node.idx in cons[i]

    def test_nary_add(self):
        g = TracedGraph()
        ids = [g.leaf(np.full(3, float(k))) for k in range(4)]
        s = g.add(*ids)
        np.testing.assert_array_equal(g.value(s), np.full(3, 6.0))
        g.replay()

    def test_add_requires_two_inputs(self):
        g = TracedGraph()
        x = g.leaf(np.zeros(2))
        with pytest.raises(ValueError):
            g.add(x)

    def test_unknown_input_id_raises(self):
        g = TracedGraph()
        x = g.leaf(np.zeros(2))
        with pytest.raises(ValueError):
            g.sub(x, 99)

    def test_traced_lstm_matches_fused(self):
        rng = np.random.default_rng(17)
        hsz, dsz = 5, 3
        params = LstmParams(W=rng.uniform(-0.5, 0.5, size=(4 * hsz, dsz + hsz)),
                            b=rng.uniform(-0.5, 0.5, size=4 * hsz))
        h0 = rng.normal(size=hsz)
        c0 = rng.normal(size=hsz)
        x = rng.normal(size=dsz)

        h_fast, c_fast = lstm_step(h0, c0, x, params)

        g = TracedGraph()
        hid = g.leaf(h0, tag=("h", 0))
        cid = g.leaf(c0, tag=("c", 0))
        xid = g.leaf(x, tag=("x", 0))
        h_id, c_id = g.lstm_step(params, hid, cid, xid)
        g.replay()
        np.testing.assert_allclose(g.value(h_id), h_fast, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g.value(c_id), c_fast, rtol=1e-12, atol=1e-15)
        # Four gate affines are recorded separately.
        assert sum(1 for n in g.nodes if n.kind == "affine") == 4

    def test_leaf_tags_preserved(self):
        g = TracedGraph()
        g.leaf(np.zeros(1), tag=("src_embed", 2))
        assert g.leaves()[0].tag == ("src_embed", 2)
