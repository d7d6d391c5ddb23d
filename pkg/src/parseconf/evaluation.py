"""Evaluation harness: F1, rank correlation, coverage curves, and overlap@K.

Predictions are compared to gold either as exact token sequences or as sets
of grammar productions; confidence scores are judged by Spearman correlation
against per-example F1 and by coverage curves (mean F1 of the examples kept
above a confidence threshold). Interpretation methods are compared through
overlap@K against a per-token noise-injection proxy gold standard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import mr_productions
from .nncore import Array, RngStream, derive_seed
from .perturb import per_token_noise_passes
from .seq2seq import Prediction, Seq2SeqModel

# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------


def f1_detail(pred_tokens: list[str], gold_tokens: list[str],
              mode: str = "production_set") -> tuple[float, bool]:
    """(F1, fallback flag) for one prediction.

    Exact mode scores 1.0 only for identical token sequences. Production-set
    mode takes the harmonic mean of precision and recall over grammar
    productions; when either side yields no productions at all the score
    falls back to exact matching and the flag is set.
    """
    pred_tokens, gold_tokens = list(pred_tokens), list(gold_tokens)
    if mode == "exact":
        return (1.0 if pred_tokens == gold_tokens else 0.0), False
    if mode != "production_set":
        raise ValueError(f"unknown f1 mode {mode!r}")
    pred_set = set(mr_productions(pred_tokens))
    gold_set = set(mr_productions(gold_tokens))
    if not pred_set or not gold_set:
        return (1.0 if pred_tokens == gold_tokens else 0.0), True
    inter = len(pred_set & gold_set)
    if inter == 0:
        return 0.0, False
    precision = inter / len(pred_set)
    recall = inter / len(gold_set)
    return 2 * precision * recall / (precision + recall), False


def f1(pred_tokens: list[str], gold_tokens: list[str],
       mode: str = "production_set") -> float:
    return f1_detail(pred_tokens, gold_tokens, mode)[0]


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------


def _ranks(x: Array) -> Array:
    """Average ranks (1-based); tied values share the mean of their ranks."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, bool]:
    """(Spearman rho, degenerate flag): Pearson correlation of average ranks.

    Without ties this reduces to the exact rank-difference formula, which
    keeps perfectly ordered inputs at exactly +-1.0. Zero-variance ranks on
    either side make the coefficient undefined; it comes back as a flagged
    0.0 rather than NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two aligned 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx, ry = _ranks(x), _ranks(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return 0.0, True
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rx - ry
        return 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1)), False
    a = rx - rx.mean()
    b = ry - ry.mean()
    rho = float(a @ b) / float(np.sqrt((a @ a) * (b @ b)))
    return max(-1.0, min(1.0, rho)), False


# ---------------------------------------------------------------------------
# coverage curves
# ---------------------------------------------------------------------------


def coverage_curve(scores, f1s, thresholds=None) -> list[tuple]:
    """Points (threshold, coverage, mean F1) sorted by descending threshold.

    Each point keeps the examples whose score is >= the threshold; the
    lowest default threshold (the minimum score) therefore covers everything
    and reproduces the corpus mean F1 exactly. Thresholds with an empty
    subset are omitted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    f1s = np.asarray(f1s, dtype=np.float64)
    if scores.shape != f1s.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores and f1 values must align and be nonempty")
    if thresholds is None:
        thresholds = np.unique(scores)[::-1]
    points = []
    for thr in sorted(np.asarray(thresholds, dtype=np.float64), reverse=True):
        mask = scores >= thr
        if not np.any(mask):
            continue
        points.append((float(thr), float(np.mean(mask)), float(np.mean(f1s[mask]))))
    return points


def coverage_curve_csv(points: list[tuple]) -> str:
    lines = ["threshold,coverage,f1"]
    lines += [f"{t!r},{c!r},{f!r}" for t, c, f in points]
    return "\n".join(lines) + "\n"


def pav_nondecreasing(ys, weights=None) -> Array:
    """Pool-adjacent-violators fit: closest nondecreasing sequence in L2."""
    ys = np.asarray(ys, dtype=np.float64)
    w = np.ones_like(ys) if weights is None else np.asarray(weights, dtype=np.float64)
    if ys.shape != w.shape or ys.ndim != 1:
        raise ValueError("values and weights must align")
    blocks: list[list] = []  # [weight, weighted sum, count]
    for yi, wi in zip(ys, w):
        blocks.append([wi, wi * yi, 1])
        while len(blocks) > 1 and (blocks[-2][1] / blocks[-2][0]
                                   > blocks[-1][1] / blocks[-1][0]):
            wb, sb, cb = blocks.pop()
            blocks[-1][0] += wb
            blocks[-1][1] += sb
            blocks[-1][2] += cb
    out = np.empty_like(ys)
    i = 0
    for wb, sb, cb in blocks:
        out[i:i + cb] = sb / wb
        i += cb
    return out


def smooth_coverage_curve(points: list[tuple]) -> list[tuple]:
    """Isotonic smoothing of a coverage curve.

    Enforces that mean F1 never rises as coverage grows (keeping more,
    lower-confidence examples), weighting each point by its coverage. The
    thresholds and coverages are preserved.
    """
    if not points:
        return []
    pts = sorted(points, key=lambda p: p[1])  # ascending coverage
    ys = np.array([p[2] for p in pts])[::-1]
    w = np.array([p[1] for p in pts])[::-1]
    smooth = pav_nondecreasing(ys, w)[::-1]
    fitted = {(p[0], p[1]): s for p, s in zip(pts, smooth)}
    return [(t, c, float(fitted[(t, c)])) for t, c, _ in points]


# ---------------------------------------------------------------------------
# interpretation evaluation
# ---------------------------------------------------------------------------


def proxy_gold(model: Seq2SeqModel, q_tokens: list[str], pred: Prediction,
               sigma: float = 0.05, passes: int = 30, seed: int = 0) -> Array:
    """Ground-truth token uncertainty by one-token-at-a-time noise injection.

    Token t's score is the variance of the prediction's sequence probability
    across passes that perturb only that token's embedding.
    """
    from .metrics import seq_variance

    out = np.empty(len(q_tokens))
    for t in range(len(q_tokens)):
        run = per_token_noise_passes(model, q_tokens, list(pred.token_ids), t,
                                     sigma, passes=passes,
                                     seed=derive_seed(seed, "proxy", t) % 2**32)
        out[t] = seq_variance(run)
    return out


def overlap_at_k(scores_a, scores_b, k: int) -> tuple[float, bool]:
    """|top-K(a) ∩ top-K(b)| / K with ties broken toward lower token index.

    K larger than the sequence clamps to its length and sets the flag.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("scorings must be aligned nonempty 1-d sequences")
    if k < 1:
        raise ValueError("k must be >= 1")
    clamped = k > a.size
    k = min(k, a.size)
    top_a = set(sorted(range(a.size), key=lambda i: (-a[i], i))[:k])
    top_b = set(sorted(range(b.size), key=lambda i: (-b[i], i))[:k])
    return len(top_a & top_b) / k, clamped


# ---------------------------------------------------------------------------
# correlation matrix and bootstrap
# ---------------------------------------------------------------------------


def correlation_matrix(features, f1s, names: list | None = None):
    """(labels, matrix, degenerate flags) of pairwise Spearman rho.

    Columns are F1 followed by each feature. Feature input is either a
    FeatureVector list (placeholder values enter as-is) or a plain matrix
    with ``names``. Degenerate (constant) pairs flag their entries.
    """
    from .metrics import FEATURE_NAMES, FeatureVector

    if len(features) and isinstance(features[0], FeatureVector):
        X = np.array([fv.values for fv in features])
        names = list(FEATURE_NAMES)
    else:
        X = np.asarray(features, dtype=np.float64)
        if names is None:
            names = [f"f{j}" for j in range(X.shape[1])]
    f1s = np.asarray(f1s, dtype=np.float64)
    if X.shape[0] != f1s.shape[0] or X.shape[0] < 3:
        raise ValueError("need at least 3 aligned examples")
    cols = [f1s] + [X[:, j] for j in range(X.shape[1])]
    labels = ["f1"] + list(names)
    n = len(cols)
    mat = np.empty((n, n))
    flags = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i, n):
            rho, degenerate = spearman(cols[i], cols[j])
            mat[i, j] = mat[j, i] = rho
            flags[i, j] = flags[j, i] = degenerate
    return labels, mat, flags


def bootstrap_delta_rho(scores_a, scores_b, f1s, iters: int = 1000,
                        seed: int = 0) -> tuple[float, float]:
    """(observed rho_a - rho_b, one-sided bootstrap p-value for delta > 0).

    Examples are resampled with replacement; the p-value is
    (1 + #{resampled delta <= 0}) / (iters + 1). Degenerate resamples score
    a flagged rho of 0 on the affected side.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(f1s, dtype=np.float64)
    if not (a.shape == b.shape == y.shape) or a.ndim != 1:
        raise ValueError("scores and f1 values must align")
    if iters < 1:
        raise ValueError("need at least one bootstrap iteration")
    delta = spearman(a, y)[0] - spearman(b, y)[0]
    rng = RngStream(derive_seed(seed, "bootstrap"))
    n = len(y)
    worse = 0
    for _ in range(iters):
        idx = rng.integers(0, n, size=n)
        d = spearman(a[idx], y[idx])[0] - spearman(b[idx], y[idx])[0]
        if d <= 0.0:
            worse += 1
    return delta, (1 + worse) / (iters + 1)


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Bundle of evaluation outputs; serializes to JSON losslessly."""

    f1_per_example: list
    spearman_by_method: dict = field(default_factory=dict)
    coverage: list = field(default_factory=list)
    overlap_by_method: dict = field(default_factory=dict)
    correlation_labels: list = field(default_factory=list)
    correlation: list = field(default_factory=list)
    correlation_flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"f1_per_example": list(self.f1_per_example),
                "spearman_by_method": self.spearman_by_method,
                "coverage": [list(p) for p in self.coverage],
                "overlap_by_method": self.overlap_by_method,
                "correlation_labels": self.correlation_labels,
                "correlation": self.correlation,
                "correlation_flags": self.correlation_flags,
                "extra": self.extra}

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        return cls(f1_per_example=d["f1_per_example"],
                   spearman_by_method=d["spearman_by_method"],
                   coverage=[tuple(p) for p in d["coverage"]],
                   overlap_by_method=d["overlap_by_method"],
                   correlation_labels=d["correlation_labels"],
                   correlation=d["correlation"],
                   correlation_flags=d["correlation_flags"],
                   extra=d["extra"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))
