"""Tests for F1, rank correlation, coverage curves, and overlap metrics."""

import json
import math
import time

import numpy as np
import pytest

from parseconf.corpus import tokenize_mr
from parseconf.evaluation import (
    EvalReport,
    bootstrap_delta_rho,
    correlation_matrix,
    coverage_curve,
    coverage_curve_csv,
    f1,
    f1_detail,
    overlap_at_k,
    pav_nondecreasing,
    proxy_gold,
    smooth_coverage_curve,
    spearman,
)
from parseconf.nncore import RngStream, derive_seed
from parseconf.perturb import PerturbConfig, perturbed_passes
from parseconf.seq2seq import RESERVED, Vocab, greedy_decode, init_model


def tiny_model(hidden=6, seed=0):
    src = list(RESERVED) + ["turn", "the", "light", "on", "off", "now",
                            "fan", "dim", "kitchen", "bedroom"]
    tgt = list(RESERVED) + ["light-on", "(", ")", "zone", "kitchen"]
    return init_model(Vocab(src, tgt), hidden=hidden, layers=1, seed=seed)


class TestF1:
    def test_identical_sequences_score_one(self):
        toks = tokenize_mr("light-on-(zone(kitchen))")
        assert f1(toks, toks, mode="exact") == 1.0
        assert f1(toks, toks, mode="production_set") == 1.0

    def test_exact_mode_is_all_or_nothing(self):
        gold = tokenize_mr("light-on-(zone(kitchen))")
        pred = tokenize_mr("light-on-(zone(bedroom))")
        assert f1(pred, gold, mode="exact") == 0.0

    def test_disjoint_production_sets_score_zero(self):
        gold = tokenize_mr("light-on-(zone(kitchen))")
        pred = tokenize_mr("fan-off-(speed(high))")
        assert f1(pred, gold, mode="production_set") == 0.0

    def test_hand_harmonic_mean(self):
        gold = tokenize_mr("light-on-(zone(kitchen) delay(5))")
        pred = tokenize_mr("light-on-(zone(kitchen) delay(9))")
        # Shared: head and the zone production; each side has 3 productions.
        np.testing.assert_allclose(f1(pred, gold, mode="production_set"),
                                   2 / 3, rtol=1e-12)

    def test_partial_credit_beats_exact(self):
        gold = tokenize_mr("light-on-(zone(kitchen)) THEN notify-push-(text(hi))")
        pred = tokenize_mr("light-on-(zone(kitchen)) THEN notify-push-(text(yo))")
        assert f1(pred, gold, mode="exact") == 0.0
        assert 0.0 < f1(pred, gold, mode="production_set") < 1.0

    def test_unparseable_prediction_falls_back_to_exact(self):
        gold = tokenize_mr("light-on-(zone(kitchen))")
        score, fallback = f1_detail(["(", ")", "("], gold, mode="production_set")
        assert score == 0.0 and fallback

    def test_fallback_can_still_score_one(self):
        score, fallback = f1_detail(["(", "("], ["(", "("],
                                    mode="production_set")
        assert score == 1.0 and fallback

    def test_truncated_prediction_scores_gracefully(self):
        gold = tokenize_mr("light-on-(zone(kitchen) delay(5))")
        pred = gold[:3]
        assert 0.0 <= f1(pred, gold, mode="production_set") < 1.0

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            f1(["a"], ["a"], mode="bleu")


class TestSpearman:
    def test_perfect_order_is_exactly_one(self):
        rho, degenerate = spearman([1.0, 2.5, 3.0, 9.0], [2.0, 4.0, 5.0, 6.0])
        assert rho == 1.0 and not degenerate

    def test_reversed_order_is_exactly_minus_one(self):
        rho, _ = spearman([1, 2, 3, 4, 5], [10, 8, 6, 4, 2])
        assert rho == -1.0

    def test_hand_case(self):
        rho, _ = spearman([1, 2, 3, 4], [1, 3, 2, 4])
        assert rho == 0.8

    def test_tied_ranks_use_means(self):
        rho, _ = spearman([1, 1, 2], [1, 2, 3])
        np.testing.assert_allclose(rho, math.sqrt(3) / 2, rtol=1e-12)

    def test_monotone_transform_invariance(self):
        rng = RngStream(derive_seed(1, "sp"))
        x = rng.normal(20)
        y = rng.normal(20)
        base = spearman(x, y)
        assert spearman(np.exp(x), y) == base
        assert spearman(x, 3.0 * y + 7.0) == base

    def test_constant_input_flagged(self):
        rho, degenerate = spearman([2, 2, 2, 2], [1, 2, 3, 4])
        assert rho == 0.0 and degenerate

    def test_bounds(self):
        rng = RngStream(derive_seed(2, "sp"))
        for _ in range(20):
            x, y = rng.normal(10), rng.normal(10)
            rho, _ = spearman(x, y)
            assert -1.0 <= rho <= 1.0

    def test_input_validation(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2])
        with pytest.raises(ValueError):
            spearman([1, 2, 3], [1, 2])


class TestCoverageCurve:
    def test_full_coverage_point_is_corpus_mean(self):
        scores = [0.9, 0.5, 0.2, 0.7]
        f1s = [1.0, 0.5, 0.0, 1.0]
        points = coverage_curve(scores, f1s)
        thr, cov, val = points[-1]
        assert thr == 0.2 and cov == 1.0
        assert val == float(np.mean(f1s))

    def test_thresholds_descend_and_coverage_ascends(self):
        rng = RngStream(derive_seed(3, "cov"))
        scores = rng.random(30)
        f1s = rng.random(30)
        points = coverage_curve(scores, f1s)
        thrs = [p[0] for p in points]
        covs = [p[1] for p in points]
        assert thrs == sorted(thrs, reverse=True)
        assert covs == sorted(covs)

    def test_oracle_scores_give_monotone_curve(self):
        rng = RngStream(derive_seed(4, "cov"))
        f1s = rng.random(25)
        points = coverage_curve(f1s, f1s)
        vals = [p[2] for p in points]
        for a, b in zip(vals, vals[1:]):
            assert b <= a + 1e-12

    def test_single_example(self):
        assert coverage_curve([0.4], [0.8]) == [(0.4, 1.0, 0.8)]

    def test_empty_subsets_omitted(self):
        points = coverage_curve([0.1, 0.2], [1.0, 0.0], thresholds=[0.5, 0.15, 0.0])
        assert [p[0] for p in points] == [0.15, 0.0]

    def test_validation(self):
        with pytest.raises(ValueError):
            coverage_curve([], [])
        with pytest.raises(ValueError):
            coverage_curve([0.1], [0.2, 0.3])

    def test_csv_round_trips(self):
        points = coverage_curve([0.9, 0.5, 0.2], [1.0, 1 / 3, 0.0])
        text = coverage_curve_csv(points)
        lines = text.strip().split("\n")
        assert lines[0] == "threshold,coverage,f1"
        parsed = [tuple(float(v) for v in ln.split(",")) for ln in lines[1:]]
        assert parsed == points


class TestIsotonic:
    def test_pav_hand_cases(self):
        np.testing.assert_allclose(pav_nondecreasing([3.0, 1.0, 2.0]),
                                   [2.0, 2.0, 2.0])
        np.testing.assert_allclose(pav_nondecreasing([1.0, 3.0, 2.0]),
                                   [1.0, 2.5, 2.5])

    def test_pav_keeps_sorted_input(self):
        ys = [0.1, 0.4, 0.4, 0.9]
        assert pav_nondecreasing(ys).tolist() == ys

    def test_pav_output_nondecreasing(self):
        rng = RngStream(derive_seed(5, "pav"))
        for _ in range(10):
            out = pav_nondecreasing(rng.random(15))
            assert np.all(np.diff(out) >= -1e-15)

    def test_pav_respects_weights(self):
        out = pav_nondecreasing([0.0, 1.0, 0.0], weights=[1.0, 1.0, 100.0])
        np.testing.assert_allclose(out[1], out[2])
        # Heavy third point pulls the pooled block mean to (1*1 + 100*0)/101.
        np.testing.assert_allclose(out[1], 1 / 101, rtol=1e-12)
        assert out[0] == 0.0

    def test_smoothed_curve_monotone_in_coverage(self):
        rng = RngStream(derive_seed(6, "pav"))
        scores = rng.random(40)
        f1s = np.clip(scores + 0.3 * rng.normal(40), 0.0, 1.0)
        smoothed = smooth_coverage_curve(coverage_curve(scores, f1s))
        by_cov = sorted(smoothed, key=lambda p: p[1])
        vals = [p[2] for p in by_cov]
        for a, b in zip(vals, vals[1:]):
            assert b <= a + 1e-12

    def test_smoothing_preserves_thresholds_and_coverage(self):
        points = coverage_curve([0.9, 0.5, 0.2], [0.0, 1.0, 0.5])
        smoothed = smooth_coverage_curve(points)
        assert [(p[0], p[1]) for p in smoothed] == [(p[0], p[1]) for p in points]
        assert smooth_coverage_curve([]) == []


class TestProxyGold:
    def test_zero_sigma_gives_exact_zeros(self):
        model = tiny_model()
        q = ["turn", "the", "light", "on"]
        pred = greedy_decode(model, q)
        out = proxy_gold(model, q, pred, sigma=0.0, passes=3)
        assert out.tolist() == [0.0] * len(q)

    def test_deterministic_and_per_token(self):
        model = tiny_model(seed=1)
        q = ["turn", "the", "light", "on"]
        pred = greedy_decode(model, q)
        a = proxy_gold(model, q, pred, sigma=0.05, passes=4, seed=2)
        b = proxy_gold(model, q, pred, sigma=0.05, passes=4, seed=2)
        assert np.array_equal(a, b)
        assert a.shape == (4,)
        assert np.all(a >= 0.0)
        assert np.any(a > 0.0)

    def test_runtime_scales_linearly_with_length(self):
        model = tiny_model(seed=2)
        q = ["turn", "the", "light", "on", "now", "fan"]
        pred = greedy_decode(model, q[:4])
        tgt = pred

        def timed(fn):
            best = math.inf
            for _ in range(3):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            return best

        single = timed(lambda: perturbed_passes(
            model, q, list(tgt.token_ids),
            PerturbConfig(passes=8, kind="gaussian", sigma=0.05)))
        full = timed(lambda: proxy_gold(model, q, tgt, sigma=0.05, passes=8))
        ratio = full / single
        assert len(q) * 0.7 <= ratio <= len(q) * 1.3


class TestOverlapAtK:
    def test_paper_hand_case(self):
        a = np.zeros(9)
        b = np.zeros(9)
        a[[7, 8, 2, 3]] = [4, 3, 2, 1]
        b[[7, 8, 3, 4]] = [4, 3, 2, 1]
        val, clamped = overlap_at_k(a, b, 4)
        assert val == 0.75 and not clamped

    def test_identical_scorings(self):
        x = np.array([0.3, 0.9, 0.1])
        assert overlap_at_k(x, x, 2) == (1.0, False)

    def test_disjoint_top_sets(self):
        a = np.array([9.0, 8.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 8.0, 9.0])
        assert overlap_at_k(a, b, 2)[0] == 0.0

    def test_ties_break_to_lower_index(self):
        a = np.ones(4)
        b = np.zeros(4)
        b[[0, 1]] = 1.0
        assert overlap_at_k(a, b, 2)[0] == 1.0

    def test_k_clamped_with_flag(self):
        a = np.array([1.0, 2.0])
        val, clamped = overlap_at_k(a, a, 5)
        assert val == 1.0 and clamped

    def test_symmetry_and_scale_invariance(self):
        rng = RngStream(derive_seed(7, "ov"))
        a, b = rng.random(12), rng.random(12)
        assert overlap_at_k(a, b, 4) == overlap_at_k(b, a, 4)
        assert overlap_at_k(a, b, 4) == overlap_at_k(5.0 * a, b, 4)

    def test_validation(self):
        with pytest.raises(ValueError):
            overlap_at_k([1.0], [1.0, 2.0], 1)
        with pytest.raises(ValueError):
            overlap_at_k([1.0, 2.0], [1.0, 2.0], 0)


class TestCorrelationMatrix:
    def test_duplicated_feature_correlates_perfectly(self):
        rng = RngStream(derive_seed(8, "cm"))
        col = rng.normal(10)
        X = np.stack([col, col.copy()], axis=1)
        f1s = rng.normal(10)
        labels, mat, flags = correlation_matrix(X, f1s)
        assert labels == ["f1", "f0", "f1"] or labels[1:] == ["f0", "f1"]
        assert mat[1, 2] == 1.0
        assert not flags.any()

    def test_symmetric_with_unit_diagonal(self):
        rng = RngStream(derive_seed(9, "cm"))
        X = rng.normal((12, 3))
        f1s = rng.normal(12)
        _, mat, _ = correlation_matrix(X, f1s)
        assert np.array_equal(mat, mat.T)
        assert np.array_equal(np.diag(mat), np.ones(4))

    def test_matches_pairwise_spearman_exactly(self):
        rng = RngStream(derive_seed(10, "cm"))
        X = rng.normal((9, 2))
        f1s = rng.normal(9)
        _, mat, _ = correlation_matrix(X, f1s)
        cols = [f1s, X[:, 0], X[:, 1]]
        for i in range(3):
            for j in range(3):
                assert mat[i, j] == spearman(cols[i], cols[j])[0]

    def test_constant_column_flagged(self):
        X = np.zeros((8, 2))
        X[:, 1] = np.arange(8)
        f1s = np.arange(8.0)
        _, mat, flags = correlation_matrix(X, f1s)
        assert flags[1].all() and flags[:, 1].all()
        assert mat[0, 1] == 0.0

    def test_custom_names_label_rows(self):
        X = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 4.0]])
        labels, _, _ = correlation_matrix(X, [0.1, 0.2, 0.3],
                                          names=["var", "ent"])
        assert labels == ["f1", "var", "ent"]

    def test_too_few_examples_rejected(self):
        with pytest.raises(ValueError):
            correlation_matrix(np.zeros((2, 2)), [0.0, 1.0])


class TestBootstrap:
    def test_perfect_scorer_beats_noise(self):
        rng = RngStream(derive_seed(11, "bs"))
        f1s = rng.random(40)
        noise = rng.normal(40)
        delta, p = bootstrap_delta_rho(f1s, noise, f1s, iters=200, seed=1)
        assert delta > 0.5
        assert p < 0.05

    def test_identical_scorers_have_large_p(self):
        rng = RngStream(derive_seed(12, "bs"))
        f1s = rng.random(30)
        s = rng.normal(30)
        delta, p = bootstrap_delta_rho(s, s, f1s, iters=100, seed=2)
        assert delta == 0.0
        assert p > 0.5

    def test_swapping_scorers_negates_delta(self):
        rng = RngStream(derive_seed(13, "bs"))
        f1s, a, b = rng.random(25), rng.normal(25), rng.normal(25)
        d1, _ = bootstrap_delta_rho(a, b, f1s, iters=10, seed=3)
        d2, _ = bootstrap_delta_rho(b, a, f1s, iters=10, seed=3)
        np.testing.assert_allclose(d1, -d2, rtol=1e-12)

    def test_deterministic(self):
        rng = RngStream(derive_seed(14, "bs"))
        f1s, a, b = rng.random(20), rng.normal(20), rng.normal(20)
        assert (bootstrap_delta_rho(a, b, f1s, iters=50, seed=4)
                == bootstrap_delta_rho(a, b, f1s, iters=50, seed=4))

    def test_p_value_bounds(self):
        rng = RngStream(derive_seed(15, "bs"))
        f1s, a, b = rng.random(15), rng.normal(15), rng.normal(15)
        _, p = bootstrap_delta_rho(a, b, f1s, iters=19, seed=5)
        assert 1 / 20 <= p <= 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            bootstrap_delta_rho([1.0, 2.0], [1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            bootstrap_delta_rho([1.0] * 5, [1.0] * 5, [1.0] * 5, iters=0)


class TestEvalReport:
    def test_json_round_trip(self, tmp_path):
        report = EvalReport(
            f1_per_example=[1.0, 0.5, 0.0],
            spearman_by_method={"conf": {"rho": 0.8, "degenerate": False}},
            coverage=[(0.9, 0.5, 1.0), (0.1, 1.0, 0.5)],
            overlap_by_method={"backprop": 0.75},
            correlation_labels=["f1", "x"],
            correlation=[[1.0, 0.5], [0.5, 1.0]],
            correlation_flags=[[False, False], [False, False]],
            extra={"seed": 3})
        path = tmp_path / "report.json"
        report.save(path)
        back = EvalReport.load(path)
        assert back == report
        json.loads(path.read_text())
