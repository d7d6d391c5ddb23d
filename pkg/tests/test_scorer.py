"""Tests for the boosted confidence scorer."""

import itertools
import math

import numpy as np
import pytest

from parseconf.metrics import FEATURE_NAMES
from parseconf.nncore import RngStream, derive_seed, sigmoid
from parseconf.scorer import (
    BoostedModel,
    ScorerConfig,
    TreeNode,
    cross_validate,
    cv_folds,
    feature_importance,
    fit,
    load_model,
    predict,
    save_model,
)


def logistic(x):
    return sigmoid(np.asarray(x, dtype=np.float64))


def synthetic(n=200, d=4, slope=3.0, seed=0):
    rng = RngStream(derive_seed(seed, "synth"))
    X = rng.normal((n, d))
    y = logistic(slope * X[:, 0])
    return X, y


def brute_force_root_split(X, g, h, lam=1.0):
    """Exhaustive enumeration of every (feature, threshold, default) split.

    Returns the best gain and the set of row partitions achieving it.
    """
    n = X.shape[0]
    best_gain = 0.0
    best_partitions = set()
    parent = (g.sum()) ** 2 / (h.sum() + lam)
    for j in range(X.shape[1]):
        col = X[:, j]
        finite = np.flatnonzero(~np.isnan(col))
        missing = np.flatnonzero(np.isnan(col))
        for v in np.unique(col[finite]):
            base_left = [i for i in finite if col[i] < v]
            if not base_left or len(base_left) == len(finite):
                continue
            for default_left in (True, False):
                left = set(base_left) | (set(missing) if default_left else set())
                right = set(range(n)) - left
                gl = sum(g[i] for i in left)
                hl = sum(h[i] for i in left)
                gr = sum(g[i] for i in right)
                hr = sum(h[i] for i in right)
                gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best_partitions = {frozenset(left)}
                elif abs(gain - best_gain) <= 1e-12 and best_gain > 0:
                    best_partitions.add(frozenset(left))
    return best_gain, best_partitions


def root_partition(model, X):
    root = model.trees[0]
    left = set()
    for i in range(X.shape[0]):
        x = X[i, root.feature]
        if (np.isnan(x) and root.default_left) or (not np.isnan(x) and x < root.threshold):
            left.add(i)
    return frozenset(left)


class TestFit:
    def test_constant_targets_give_constant_model(self):
        X = np.zeros((12, 3))
        model = fit(X, np.ones(12))
        assert model.trees == []
        assert predict(model, np.zeros(3)) >= 0.95

    def test_all_zero_targets(self):
        model = fit(np.zeros((12, 2)), np.zeros(12))
        assert model.trees == []
        assert predict(model, np.zeros(2)) <= 0.05

    def test_synthetic_monotone_heldout_correlation(self):
        from parseconf.evaluation import spearman

        X, y = synthetic(n=200)
        model = fit(X[:150], y[:150], ScorerConfig(seed=3))
        rho, degenerate = spearman(predict(model, X[150:]), y[150:])
        assert not degenerate
        assert rho >= 0.95

    def test_training_loss_non_increasing_full_batch(self):
        X, y = synthetic(n=80, seed=1)
        cfg = ScorerConfig(n_trees=30, max_depth=3, subsample=1.0, seed=1)
        model = fit(X, y, cfg)
        losses = model.train_losses
        assert len(losses) == 31
        for a, b in itertools.pairwise(losses):
            assert b <= a + 1e-12

    def test_training_loss_decreases_with_subsampling(self):
        X, y = synthetic(n=80, seed=2)
        model = fit(X, y, ScorerConfig(seed=2))
        assert model.train_losses[-1] < model.train_losses[0]

    def test_binary_feature_split_found(self):
        X = np.zeros((14, 3))
        X[:, 1] = [0, 1] * 7
        y = X[:, 1].copy()
        cfg = ScorerConfig(n_trees=1, max_depth=1, subsample=1.0)
        model = fit(X, y, cfg)
        root = model.trees[0]
        assert root.feature == 1
        assert 0.0 < root.threshold < 1.0
        assert model.trees[0].depth() == 1

    def test_split_matches_exhaustive_enumeration(self):
        for seed in range(5):
            rng = RngStream(derive_seed(seed, "oracle"))
            X = rng.normal((16, 3))
            X[rng.random((16, 3)) < 0.2] = np.nan
            y = (rng.random(16) > 0.5).astype(np.float64)
            if np.all(y == y[0]):
                continue
            cfg = ScorerConfig(n_trees=1, max_depth=1, subsample=1.0)
            model = fit(X, y, cfg)
            p = logistic(np.full(16, model.base_score))
            g, h = p - y, p * (1 - p)
            best_gain, partitions = brute_force_root_split(X, g, h)
            root = model.trees[0]
            if best_gain == 0.0:
                assert root.is_leaf
                continue
            np.testing.assert_allclose(root.gain, best_gain, rtol=1e-9)
            assert root_partition(model, X) in partitions

    def test_tie_breaks_to_lowest_feature(self):
        X = np.zeros((12, 2))
        X[:, 0] = [0, 1] * 6
        X[:, 1] = X[:, 0]
        y = X[:, 0].copy()
        model = fit(X, y, ScorerConfig(n_trees=1, max_depth=1, subsample=1.0))
        assert model.trees[0].feature == 0

    def test_depth_limit_respected(self):
        X, y = synthetic(n=60, seed=4)
        for depth in (1, 2, 3):
            model = fit(X, y, ScorerConfig(n_trees=5, max_depth=depth,
                                           subsample=1.0))
            assert all(t.depth() <= depth for t in model.trees)

    def test_missing_values_route_to_learned_default(self):
        X = np.zeros((20, 1))
        X[:14, 0] = [0, 1] * 7
        X[14:, 0] = np.nan
        y = np.array([0.0, 1.0] * 7 + [1.0] * 6)
        model = fit(X, y, ScorerConfig(n_trees=5, max_depth=1, subsample=1.0))
        assert not model.trees[0].default_left
        assert predict(model, np.array([np.nan])) > predict(model, np.array([0.0]))

    def test_validation_errors(self):
        X, y = synthetic(n=9)
        with pytest.raises(ValueError):
            fit(X, y)
        X, y = synthetic(n=12)
        with pytest.raises(ValueError):
            fit(X, y + 2.0)
        with pytest.raises(ValueError):
            fit(X, y[:-1])
        with pytest.raises(ValueError):
            fit(X, y, ScorerConfig(subsample=0.0))
        with pytest.raises(ValueError):
            fit(X, y, ScorerConfig(max_depth=0))

    def test_deterministic_fit(self):
        X, y = synthetic(n=60, seed=5)
        m1 = fit(X, y, ScorerConfig(seed=7))
        m2 = fit(X, y, ScorerConfig(seed=7))
        probe = RngStream(derive_seed(0, "probe")).normal((10, 4))
        assert np.array_equal(predict(m1, probe), predict(m2, probe))


class TestPredict:
    def test_zero_trees_gives_logistic_base(self):
        X, y = synthetic(n=20)
        model = fit(X, y, ScorerConfig(n_trees=0))
        expected = float(logistic(np.array([model.base_score]))[0])
        assert predict(model, X[0]) == expected

    def test_predictions_in_open_unit_interval(self):
        X, y = synthetic(n=100, seed=6)
        model = fit(X, y, ScorerConfig(seed=6))
        preds = predict(model, X)
        assert np.all((preds > 0.0) & (preds < 1.0))

    def test_hand_built_monotone_model(self):
        tree = TreeNode(feature=0, threshold=0.5, default_left=True, gain=1.0,
                        left=TreeNode(weight=-0.4), right=TreeNode(weight=0.7))
        model = BoostedModel(trees=[tree], learning_rate=0.1, base_score=0.0,
                             feature_count=1, schema="raw-1",
                             config=ScorerConfig())
        grid = np.linspace(-2, 2, 41)
        preds = [predict(model, np.array([v])) for v in grid]
        assert all(b >= a for a, b in itertools.pairwise(preds))

    def test_fitted_single_feature_model_monotone(self):
        rng = RngStream(derive_seed(8, "mono"))
        X = rng.normal((80, 1))
        y = logistic(2.0 * X[:, 0])
        model = fit(X, y, ScorerConfig(seed=8))
        grid = np.linspace(-3, 3, 61)
        preds = [predict(model, np.array([v])) for v in grid]
        assert all(b >= a - 1e-12 for a, b in itertools.pairwise(preds))

    def test_wrong_width_rejected(self):
        X, y = synthetic(n=20, d=3)
        model = fit(X, y)
        with pytest.raises(ValueError):
            predict(model, np.zeros(5))

    def test_feature_vector_schema_checked(self):
        X, y = synthetic(n=20, d=3)
        model = fit(X, y)
        from parseconf.metrics import FeatureVector
        fv = FeatureVector(values=tuple([0.0] * len(FEATURE_NAMES)),
                           missing=frozenset())
        with pytest.raises(ValueError):
            predict(model, fv)


class TestFeatureImportance:
    def test_single_feature_model(self):
        X = np.zeros((14, 3))
        X[:, 2] = [0, 1] * 7
        y = X[:, 2].copy()
        model = fit(X, y, ScorerConfig(n_trees=3, max_depth=1, subsample=1.0))
        imp = feature_importance(model)
        assert imp["f2"] == 1.0
        assert imp["f0"] == 0.0 and imp["f1"] == 0.0

    def test_signal_beats_noise(self):
        rng = RngStream(derive_seed(9, "imp"))
        X = rng.normal((120, 2))
        y = logistic(3.0 * X[:, 0])
        model = fit(X, y, ScorerConfig(seed=9))
        imp = feature_importance(model)
        assert imp["f0"] == 1.0
        assert imp["f0"] > imp["f1"]

    def test_treeless_model_all_zero(self):
        model = fit(np.zeros((12, 2)), np.ones(12))
        assert set(feature_importance(model).values()) == {0.0}

    def test_normalized_to_unit_max(self):
        X, y = synthetic(n=100, seed=10)
        model = fit(X, y, ScorerConfig(seed=10))
        imp = feature_importance(model)
        assert max(imp.values()) == 1.0
        assert all(0.0 <= v <= 1.0 for v in imp.values())


class TestCrossValidate:
    def test_folds_partition_examples(self):
        folds = cv_folds(23, 4, seed=1)
        joined = np.sort(np.concatenate(folds))
        assert np.array_equal(joined, np.arange(23))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_fold_validation(self):
        with pytest.raises(ValueError):
            cv_folds(3, 2)
        with pytest.raises(ValueError):
            cv_folds(30, 1)

    def test_single_config_grid(self):
        X, y = synthetic(n=40, seed=11)
        cfg = ScorerConfig(n_trees=20, max_depth=3)
        best, results = cross_validate(X, y, grid=[cfg], folds=2, seed=1)
        assert best is cfg
        assert set(results) == {(20, 3)}

    def test_best_config_maximizes_cv_score(self):
        X, y = synthetic(n=60, seed=12)
        grid = [ScorerConfig(n_trees=t, max_depth=d)
                for t in (5, 20) for d in (2, 3)]
        best, results = cross_validate(X, y, grid=grid, folds=3, seed=2)
        assert results[(best.n_trees, best.max_depth)] == max(results.values())

    def test_deterministic_selection(self):
        X, y = synthetic(n=40, seed=13)
        grid = [ScorerConfig(n_trees=5, max_depth=2),
                ScorerConfig(n_trees=10, max_depth=3)]
        r1 = cross_validate(X, y, grid=grid, folds=2, seed=3)[1]
        r2 = cross_validate(X, y, grid=grid, folds=2, seed=3)[1]
        assert r1 == r2

    def test_default_grid_covers_tuned_space(self):
        X, y = synthetic(n=70, seed=14)
        _, results = cross_validate(X, y, folds=2, seed=4)
        assert set(results) == {(t, d) for t in (20, 50) for d in (3, 4, 5)}


class TestSerialization:
    def test_round_trip_is_exact(self, tmp_path):
        X, y = synthetic(n=60, seed=15)
        X[::7, 1] = np.nan
        model = fit(X, y, ScorerConfig(seed=15))
        path = tmp_path / "scorer.json"
        save_model(model, path)
        back = load_model(path)
        assert back.base_score == model.base_score
        assert back.train_losses == model.train_losses
        probe = np.concatenate([X[:5], np.full((1, 4), np.nan)])
        assert np.array_equal(predict(back, probe), predict(model, probe))

    def test_serialized_bytes_deterministic(self, tmp_path):
        X, y = synthetic(n=30, seed=16)
        model = fit(X, y, ScorerConfig(seed=16))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_format_checked(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_model(path)

    def test_loaded_feature_names_survive(self, tmp_path):
        X, y = synthetic(n=30, seed=17)
        model = fit(X, y, ScorerConfig(n_trees=3, seed=17))
        model.feature_names = [f"name{j}" for j in range(4)]
        path = tmp_path / "named.json"
        save_model(model, path)
        assert load_model(path).feature_names == model.feature_names


class TestLossMath:
    def test_leaf_weight_is_newton_step(self):
        y = np.array([0.0, 1.0] * 6)
        X = np.zeros((12, 1))
        cfg = ScorerConfig(n_trees=1, max_depth=1, subsample=1.0,
                           learning_rate=0.1, lam=1.0)
        model = fit(X, y, cfg)
        root = model.trees[0]
        assert root.is_leaf
        p = logistic(np.full(12, model.base_score))
        g, h = p - y, p * (1 - p)
        expected = -0.1 * g.sum() / (h.sum() + 1.0)
        np.testing.assert_allclose(root.weight, expected, rtol=1e-12)

    def test_base_score_is_target_log_odds(self):
        y = np.concatenate([np.zeros(5), np.ones(15)])
        model = fit(np.zeros((20, 1)), y, ScorerConfig(n_trees=0))
        np.testing.assert_allclose(model.base_score, math.log(0.75 / 0.25),
                                   rtol=1e-12)
