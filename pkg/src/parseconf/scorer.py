"""Gradient-boosted confidence scorer with a logistic output.

Fits regression trees to soft-label logistic loss by second-order boosting:
with p = logistic(score), gradients are g = p - y and hessians h = p(1 - p),
and each leaf takes the Newton step -sum(g) / (sum(h) + lambda). Targets are
per-prediction F1 values in [0, 1], so the fitted score reads directly as a
confidence in (0, 1).

Splits are found by exhaustive enumeration of (feature, threshold) gain.
Missing feature values (NaN) are routed to a default child learned per split
by trying both directions, so flagged-missing features never poison a tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import FEATURE_NAMES, FeatureVector, feature_matrix, schema_hash
from .nncore import Array, RngStream, derive_seed, sigmoid

MODEL_FORMAT = "boosted-scorer-v1"

GRID_TREES = (20, 50)
GRID_DEPTHS = (3, 4, 5)


@dataclass
class ScorerConfig:
    """Boosting hyperparameters; grid fields carry the tuned search space."""

    n_trees: int = 50
    max_depth: int = 3
    subsample: float = 0.8
    learning_rate: float = 0.1
    lam: float = 1.0
    cv_folds: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.n_trees < 0 or self.max_depth < 1:
            raise ValueError("n_trees must be >= 0 and max_depth >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.learning_rate <= 0 or self.lam < 0:
            raise ValueError("learning_rate must be > 0 and lam >= 0")
        if self.cv_folds < 2:
            raise ValueError("need at least 2 CV folds")

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "subsample": self.subsample, "learning_rate": self.learning_rate,
                "lam": self.lam, "cv_folds": self.cv_folds, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerConfig":
        return cls(**d)


@dataclass
class TreeNode:
    """One node of a regression tree; leaves carry the shrunk weight."""

    feature: int | None = None
    threshold: float = 0.0
    default_left: bool = True
    gain: float = 0.0
    weight: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"weight": self.weight}
        return {"feature": self.feature, "threshold": self.threshold,
                "default_left": self.default_left, "gain": self.gain,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "feature" not in d:
            return cls(weight=float(d["weight"]))
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   default_left=bool(d["default_left"]), gain=float(d["gain"]),
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


def _leaf_value(X_row: Array, node: TreeNode) -> float:
    while not node.is_leaf:
        x = X_row[node.feature]
        if np.isnan(x):
            node = node.left if node.default_left else node.right
        elif x < node.threshold:
            node = node.left
        else:
            node = node.right
    return node.weight


@dataclass
class BoostedModel:
    """Fitted boosting ensemble; prediction is logistic(base + tree sum)."""

    trees: list
    learning_rate: float
    base_score: float
    feature_count: int
    schema: str
    config: ScorerConfig
    feature_names: list | None = None
    train_losses: list = field(default_factory=list)

    def raw_score(self, x: Array) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.feature_count,):
            raise ValueError(f"expected {self.feature_count} features, "
                             f"got shape {x.shape}")
        return self.base_score + sum(_leaf_value(x, t) for t in self.trees)


def _as_matrix(features) -> tuple[Array, str, list | None]:
    if len(features) and isinstance(features[0], FeatureVector):
        return feature_matrix(list(features)), schema_hash(), list(FEATURE_NAMES)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-d array or FeatureVector list")
    return X, f"raw-{X.shape[1]}", None


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    return math.log(p / (1.0 - p))


def _soft_logistic_loss(scores: Array, y: Array) -> float:
    # y*softplus(-s) + (1-y)*softplus(s), stable via logaddexp
    return float(np.mean(y * np.logaddexp(0.0, -scores)
                         + (1.0 - y) * np.logaddexp(0.0, scores)))


def _split_gain(gl: float, hl: float, gr: float, hr: float, lam: float) -> float:
    parent = (gl + gr) ** 2 / (hl + hr + lam)
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)


def _best_split(X: Array, g: Array, h: Array, rows: Array, lam: float):
    """Exhaustive (feature, threshold, default side) search by gain.

    Ties keep the earliest candidate: lowest feature index, then lowest
    threshold, then default-left.
    """
    best = None
    best_gain = 0.0
    for j in range(X.shape[1]):
        col = X[rows, j]
        finite = ~np.isnan(col)
        miss_rows = rows[~finite]
        fin_rows = rows[finite]
        if fin_rows.size < 2:
            continue
        order = np.argsort(col[finite], kind="stable")
        fin_rows = fin_rows[order]
        vals = col[finite][order]
        g_miss, h_miss = float(g[miss_rows].sum()), float(h[miss_rows].sum())
        for i in range(len(vals) - 1):
            if vals[i] == vals[i + 1]:
                continue
            thr = 0.5 * (vals[i] + vals[i + 1])
            left = fin_rows[:i + 1]
            gl, hl = float(g[left].sum()), float(h[left].sum())
            gr = float(g[fin_rows].sum()) - gl
            hr = float(h[fin_rows].sum()) - hl
            for default_left in (True, False):
                if default_left:
                    gain = _split_gain(gl + g_miss, hl + h_miss, gr, hr, lam)
                else:
                    gain = _split_gain(gl, hl, gr + g_miss, hr + h_miss, lam)
                if gain > best_gain + 1e-15:
                    best_gain = gain
                    best = (j, thr, default_left)
    if best is None:
        return None
    j, thr, default_left = best
    col = X[rows, j]
    finite = ~np.isnan(col)
    go_left = np.zeros(len(rows), dtype=bool)
    go_left[finite] = col[finite] < thr
    go_left[~finite] = default_left
    return j, thr, default_left, best_gain, rows[go_left], rows[~go_left]


def _build_tree(X: Array, g: Array, h: Array, rows: Array, depth: int,
                cfg: ScorerConfig) -> TreeNode:
    G, H = float(g[rows].sum()), float(h[rows].sum())
    if depth >= cfg.max_depth or rows.size < 2:
        return TreeNode(weight=-cfg.learning_rate * G / (H + cfg.lam))
    found = _best_split(X, g, h, rows, cfg.lam)
    if found is None:
        return TreeNode(weight=-cfg.learning_rate * G / (H + cfg.lam))
    j, thr, default_left, gain, left_rows, right_rows = found
    return TreeNode(feature=j, threshold=thr, default_left=default_left,
                    gain=gain,
                    left=_build_tree(X, g, h, left_rows, depth + 1, cfg),
                    right=_build_tree(X, g, h, right_rows, depth + 1, cfg))


def fit(features, targets, config: ScorerConfig = ScorerConfig()) -> BoostedModel:
    """Boost regression trees against soft-label logistic loss.

    Each round subsamples rows, fits one tree to the current gradients and
    hessians, and adds its shrunk leaf values to the running scores. With
    full-batch rounds the training loss is non-increasing; ``train_losses``
    records the loss after the base score and after every round.
    """
    config.validate()
    X, schema, names = _as_matrix(features)
    y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and targets disagree in length")
    if y.shape[0] < 10:
        raise ValueError("need at least 10 training examples")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("targets must lie in [0, 1]")

    base = _logit(float(np.mean(y)))
    model = BoostedModel(trees=[], learning_rate=config.learning_rate,
                         base_score=base, feature_count=X.shape[1],
                         schema=schema, config=config, feature_names=names)
    scores = np.full(y.shape[0], base)
    model.train_losses.append(_soft_logistic_loss(scores, y))
    if np.all(y == y[0]):
        return model

    rng = RngStream(derive_seed(config.seed, "boost"))
    for _ in range(config.n_trees):
        p = sigmoid(scores)
        g = p - y
        h = p * (1.0 - p)
        if config.subsample < 1.0:
            keep = rng.random(y.shape[0]) < config.subsample
            rows = np.flatnonzero(keep)
            if rows.size < 2:
                rows = np.arange(y.shape[0])
        else:
            rows = np.arange(y.shape[0])
        tree = _build_tree(X, g, h, rows, 0, config)
        model.trees.append(tree)
        scores += np.array([_leaf_value(X[i], tree) for i in range(y.shape[0])])
        model.train_losses.append(_soft_logistic_loss(scores, y))
    return model


def _logistic(s: float) -> float:
    return float(sigmoid(np.array([s]))[0])


def predict(model: BoostedModel, features) -> float | Array:
    """Confidence in (0, 1) for one FeatureVector, one row, or a matrix."""
    if isinstance(features, FeatureVector):
        if model.schema != schema_hash():
            raise ValueError(f"model was fit on schema {model.schema}, "
                             f"feature vectors carry {schema_hash()}")
        return _logistic(model.raw_score(features.masked()))
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        return _logistic(model.raw_score(X))
    return np.array([_logistic(model.raw_score(row)) for row in X])


def feature_importance(model: BoostedModel) -> dict:
    """Mean split gain per feature, normalized by the maximum.

    Unused features map to 0.0; a treeless model maps every feature to 0.0.
    """
    gains: dict[int, list] = {}

    def walk(node: TreeNode):
        if node.is_leaf:
            return
        gains.setdefault(node.feature, []).append(node.gain)
        walk(node.left)
        walk(node.right)

    for tree in model.trees:
        walk(tree)
    means = {j: float(np.mean(v)) for j, v in gains.items()}
    top = max(means.values()) if means else 0.0

    def name(j: int) -> str:
        return model.feature_names[j] if model.feature_names else f"f{j}"

    return {name(j): (means.get(j, 0.0) / top if top > 0 else 0.0)
            for j in range(model.feature_count)}


def cv_folds(n: int, folds: int, seed: int = 0) -> list:
    """Shuffled validation folds partitioning range(n); sizes differ by <= 1."""
    if folds < 2 or n < 2 * folds:
        raise ValueError("need at least 2 folds with 2 examples each")
    idx = np.arange(n)
    RngStream(derive_seed(seed, "cv")).shuffle(idx)
    return np.array_split(idx, folds)


def cross_validate(features, targets, grid=None, folds: int = 3,
                   seed: int = 0) -> tuple[ScorerConfig, dict]:
    """Grid search by mean held-out Spearman correlation.

    Folds partition the examples (each lands in exactly one validation
    fold). Ties keep the earliest grid entry; the grid defaults to the
    tuned (n_trees, max_depth) space.
    """
    from .evaluation import spearman

    X, schema, _ = _as_matrix(features)
    y = np.asarray(targets, dtype=np.float64)
    if grid is None:
        grid = [ScorerConfig(n_trees=t, max_depth=d, seed=seed)
                for t in GRID_TREES for d in GRID_DEPTHS]

    fold_sets = cv_folds(X.shape[0], folds, seed)

    results = {}
    best_cfg, best_score = None, -np.inf
    for k, cfg in enumerate(grid):
        rhos = []
        for f, val_idx in enumerate(fold_sets):
            train_idx = np.concatenate([fs for i, fs in enumerate(fold_sets)
                                        if i != f])
            sub = ScorerConfig(**{**cfg.to_dict(),
                                  "seed": derive_seed(seed, "fold", k, f) % 2**32})
            m = fit(X[train_idx], y[train_idx], sub)
            rho, _ = spearman(predict(m, X[val_idx]), y[val_idx])
            rhos.append(rho)
        mean_rho = float(np.mean(rhos))
        results[(cfg.n_trees, cfg.max_depth)] = mean_rho
        if mean_rho > best_score:
            best_score, best_cfg = mean_rho, cfg
    return best_cfg, results


def save_model(model: BoostedModel, path, extra: dict | None = None) -> None:
    """Write the model as JSON; ``extra`` keys stamp provenance, loader ignores them."""
    blob = {"format": MODEL_FORMAT, "base_score": model.base_score,
            "learning_rate": model.learning_rate,
            "feature_count": model.feature_count, "schema": model.schema,
            "feature_names": model.feature_names,
            "config": model.config.to_dict(),
            "train_losses": model.train_losses,
            "trees": [t.to_dict() for t in model.trees]}
    for key, val in (extra or {}).items():
        if key in blob:
            raise ValueError(f"extra key {key!r} collides with the model payload")
        blob[key] = val
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> BoostedModel:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a scorer model file: {blob.get('format')!r}")
    return BoostedModel(trees=[TreeNode.from_dict(t) for t in blob["trees"]],
                        learning_rate=blob["learning_rate"],
                        base_score=blob["base_score"],
                        feature_count=blob["feature_count"],
                        schema=blob["schema"],
                        config=ScorerConfig.from_dict(blob["config"]),
                        feature_names=blob["feature_names"],
                        train_losses=list(blob["train_losses"]))
