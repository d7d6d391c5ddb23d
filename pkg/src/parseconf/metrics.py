"""Confidence metrics computed from perturbation runs, beams, and an n-gram LM.

Every metric lands in a fixed-order ``FeatureVector``:

* perturbation metrics: population variance of per-pass sequence
  probabilities, and per-token variances aggregated by mean and max, for
  dropout and for each Gaussian noise mode;
* posterior metrics: sequence log-probability, minimum token probability,
  and per-token perplexity (average negative log-probability);
* input metrics: length-normalized n-gram log-probability of the utterance
  and the number of unknown tokens;
* distribution metrics: variance of the top-K candidate probabilities,
  Monte-Carlo sequence entropy, and exact per-step token entropies.

Variances are population variances (no sample correction) and evaluate to
an exact 0.0 whenever all passes agree, so zero-strength perturbation
yields exactly zero scores.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .nncore import Array, RngStream, derive_seed
from .perturb import PerturbationRun
from .seq2seq import Prediction, Seq2SeqModel, UNK, Vocab, encode, sample_sequence

FEATURE_NAMES = (
    "dropout_seq_var",
    "dropout_tok_avg",
    "dropout_tok_max",
    "noise_add_seq_var",
    "noise_add_tok_avg",
    "noise_add_tok_max",
    "noise_mul_seq_var",
    "noise_mul_tok_avg",
    "noise_mul_tok_max",
    "log_posterior",
    "min_token_prob",
    "avg_neg_logprob",
    "lm_logprob",
    "lm_logprob_total",
    "unk_count",
    "topk_var",
    "topk_count",
    "seq_entropy_mc",
    "tok_entropy_avg",
    "tok_entropy_max",
)

SCHEMA_VERSION = "fv1"

RUN_DROPOUT = "dropout"
RUN_NOISE_ADD = "noise_add"
RUN_NOISE_MUL = "noise_mul"


def schema_hash() -> str:
    payload = SCHEMA_VERSION + ":" + ",".join(FEATURE_NAMES)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def feature_schema() -> dict:
    return {"version": SCHEMA_VERSION, "names": list(FEATURE_NAMES),
            "hash": schema_hash()}


@dataclass(frozen=True)
class FeatureVector:
    """Feature values aligned with FEATURE_NAMES plus missing-feature flags.

    A missing feature keeps a 0.0 placeholder value; consumers that can
    route missing values (the boosting scorer) should use ``masked`` which
    replaces placeholders with NaN.
    """

    values: tuple
    missing: frozenset

    def __post_init__(self):
        if len(self.values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} values, "
                             f"got {len(self.values)}")
        unknown = set(self.missing) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown feature names flagged missing: {sorted(unknown)}")

    def get(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]

    def as_dict(self) -> dict:
        return dict(zip(FEATURE_NAMES, self.values))

    def masked(self) -> Array:
        out = np.array(self.values, dtype=np.float64)
        for name in self.missing:
            out[FEATURE_NAMES.index(name)] = np.nan
        return out

    def to_json_dict(self) -> dict:
        return {"values": list(self.values), "missing": sorted(self.missing)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FeatureVector":
        return cls(values=tuple(float(v) for v in d["values"]),
                   missing=frozenset(d["missing"]))


def feature_matrix(vectors: list[FeatureVector]) -> Array:
    """Stack masked feature vectors into an (N, D) array with NaN gaps."""
    return np.stack([fv.masked() for fv in vectors])


# ---------------------------------------------------------------------------
# variance metrics
# ---------------------------------------------------------------------------


def _pop_var(x: Array) -> float:
    """Population variance, exactly 0.0 when all entries agree."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("variance needs at least 2 values")
    if np.all(x == x[0]):
        return 0.0
    return float(np.var(x))


def seq_variance(run: PerturbationRun) -> float:
    """Variance of the per-pass sequence probabilities."""
    return _pop_var(run.seq_probs)


def token_uncertainty(run: PerturbationRun) -> tuple[Array, float, float]:
    """Per-token variances across passes, plus their mean and max."""
    if run.token_probs.shape[0] < 2:
        raise ValueError("token uncertainty needs at least 2 passes")
    u = np.array([_pop_var(run.token_probs[:, t])
                  for t in range(run.token_probs.shape[1])])
    return u, float(np.mean(u)), float(np.max(u))


# ---------------------------------------------------------------------------
# posterior metrics
# ---------------------------------------------------------------------------


def posterior_metrics(pred: Prediction) -> dict:
    """Exact clean-pass probability metrics of a prediction."""
    if len(pred.token_probs) == 0:
        raise ValueError("prediction has no scored tokens")
    return {
        "log_posterior": float(pred.logprob),
        "min_token_prob": float(np.min(pred.token_probs)),
        "avg_neg_logprob": float(-pred.logprob / len(pred.token_probs)),
    }


def count_unk(q_tokens: list[str], vocab: Vocab) -> int:
    """Number of input tokens that fall outside the source vocabulary."""
    return sum(1 for i in vocab.encode_src(list(q_tokens)) if i == UNK)


# ---------------------------------------------------------------------------
# n-gram language model
# ---------------------------------------------------------------------------

LM_BOS = "<s>"
LM_UNK = "<unk>"


class NGramLM:
    """Interpolated Witten-Bell (or Laplace) n-gram model over utterances.

    The event space is the training vocabulary plus UNK; sentence starts are
    padded with BOS context symbols and no end-of-sentence event is scored.
    Conditional distributions sum to one for every context.
    """

    def __init__(self, order: int = 3, smoothing: str = "witten_bell"):
        if order < 1:
            raise ValueError("order must be >= 1")
        if smoothing not in ("witten_bell", "laplace"):
            raise ValueError(f"unknown smoothing {smoothing!r}")
        self.order = order
        self.smoothing = smoothing
        self.vocab: set[str] = {LM_UNK}
        self._counts: dict[tuple, dict[str, int]] = {}

    def fit(self, sentences: list[list[str]]) -> "NGramLM":
        cleaned = [s for s in sentences if s]
        if not cleaned:
            raise ValueError("language model needs a nonempty corpus")
        for sent in cleaned:
            self.vocab.update(sent)
            padded = [LM_BOS] * (self.order - 1) + list(sent)
            for i, w in enumerate(sent):
                j = i + self.order - 1
                for k in range(self.order):
                    ctx = tuple(padded[j - k:j])
                    self._counts.setdefault(ctx, {})
                    self._counts[ctx][w] = self._counts[ctx].get(w, 0) + 1
        return self

    def _map(self, w: str) -> str:
        return w if w in self.vocab else LM_UNK

    def prob(self, word: str, context: tuple = ()) -> float:
        """p(word | last order-1 context tokens), smoothed."""
        w = self._map(word)
        if self.order == 1:
            ctx = ()
        else:
            ctx = tuple(c if c == LM_BOS else self._map(c) for c in context)
            ctx = ctx[-(self.order - 1):]
            ctx = (LM_BOS,) * (self.order - 1 - len(ctx)) + ctx
        if self.smoothing == "laplace":
            d = self._counts.get(ctx, {})
            n = sum(d.values())
            return (d.get(w, 0) + 1) / (n + len(self.vocab))
        return self._wb(w, ctx)

    def _wb(self, w: str, ctx: tuple) -> float:
        if len(ctx) == 0:
            d = self._counts.get((), {})
            n = sum(d.values())
            T = len(d)
            V = len(self.vocab)
            return (d.get(w, 0) + T / V) / (n + T)
        d = self._counts.get(ctx)
        if not d:
            return self._wb(w, ctx[1:])
        n = sum(d.values())
        T = len(d)
        return (d.get(w, 0) + T * self._wb(w, ctx[1:])) / (n + T)

    def logprob(self, tokens: list[str]) -> float:
        """Total log p(tokens); sentence start padded with BOS."""
        if not tokens:
            raise ValueError("cannot score an empty query")
        padded = [LM_BOS] * (self.order - 1) + [self._map(t) for t in tokens]
        total = 0.0
        for i in range(len(tokens)):
            j = i + self.order - 1
            ctx = tuple(padded[j - (self.order - 1):j])
            total += math.log(self.prob(padded[j], ctx))
        return total


def fit_lm(sentences: list[list[str]], order: int = 3,
           smoothing: str = "witten_bell") -> NGramLM:
    return NGramLM(order=order, smoothing=smoothing).fit(sentences)


def lm_logprob(lm: NGramLM, q_tokens: list[str]) -> tuple[float, float]:
    """(length-normalized, total) log probability of the utterance."""
    total = lm.logprob(list(q_tokens))
    return total / len(q_tokens), total


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------


def topk_variance(beam_results: list[Prediction], k: int = 10) -> tuple[float, int, bool]:
    """(variance of top-k candidate probabilities, k_eff, missing flag).

    Probabilities (not log-probabilities) enter the variance; they are
    computed by max-shifting the log-probs before exponentiation and
    scaling the variance back, which preserves precision for small values.
    """
    cands = beam_results[:k]
    k_eff = len(cands)
    if k_eff < 2:
        return 0.0, k_eff, True
    lps = np.array([p.logprob for p in cands])
    m = float(np.max(lps))
    shifted = np.exp(lps - m)
    return float(np.exp(2 * m) * _pop_var(shifted)), k_eff, False


def mc_sequence_entropy(sample_neg_logprob, samples: int, rng: RngStream) -> float:
    """Plug-in Monte-Carlo entropy: mean of -log p over ancestral samples.

    ``sample_neg_logprob(rng)`` draws one sequence and returns its negative
    log-probability. Identical draws short-circuit to an exact value.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    vals = np.array([float(sample_neg_logprob(rng)) for _ in range(samples)])
    if np.all(vals == vals[0]):
        return float(vals[0])
    return float(np.mean(vals))


def decoding_entropy(model: Seq2SeqModel, q_tokens: list[str], samples: int = 30,
                     seed: int = 0, max_len: int | None = None) -> float:
    """MC estimate of the sequence entropy H[a|q] of the decoder."""
    enc = encode(model, list(q_tokens))
    if max_len is None:
        max_len = 2 * len(q_tokens) + 10
    rng = RngStream(derive_seed(seed, "entropy"))
    return mc_sequence_entropy(
        lambda r: -sample_sequence(model, enc, r, max_len)[1], samples, rng)


def token_entropies(pred: Prediction) -> tuple[Array, float, float]:
    """Exact per-step entropies of the decoder distributions, with avg/max."""
    if pred.distributions is None or len(pred.distributions) == 0:
        raise ValueError("prediction carries no distributions")
    ent = np.empty(len(pred.distributions))
    for t, dist in enumerate(pred.distributions):
        nz = dist[dist > 0.0]
        ent[t] = float(-(nz * np.log(nz)).sum()) if nz.size else 0.0
    return ent, float(np.mean(ent)), float(np.max(ent))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assemble_features(q_tokens: list[str], pred: Prediction,
                      runs: dict[str, PerturbationRun], lm: NGramLM | None,
                      beam_results: list[Prediction],
                      seq_entropy_mc: float | None = None,
                      vocab: Vocab | None = None, topk: int = 10) -> FeatureVector:
    """Build the full fixed-order feature vector for one prediction.

    ``runs`` may provide "dropout", "noise_add", and "noise_mul" perturbation
    runs; absent runs (and an absent LM or entropy estimate) flag their
    features as missing rather than inventing values.
    """
    if vocab is None:
        raise ValueError("assemble_features needs the model vocabulary")
    values: dict[str, float] = {}
    missing: set[str] = set()

    for run_key, prefix in ((RUN_DROPOUT, "dropout"), (RUN_NOISE_ADD, "noise_add"),
                            (RUN_NOISE_MUL, "noise_mul")):
        names = (f"{prefix}_seq_var", f"{prefix}_tok_avg", f"{prefix}_tok_max")
        run = runs.get(run_key)
        if run is None:
            for name in names:
                values[name] = 0.0
                missing.add(name)
            continue
        sv = seq_variance(run)
        _, avg, mx = token_uncertainty(run)
        values[names[0]], values[names[1]], values[names[2]] = sv, avg, mx

    values.update(posterior_metrics(pred))

    if lm is None:
        values["lm_logprob"] = 0.0
        values["lm_logprob_total"] = 0.0
        missing.update({"lm_logprob", "lm_logprob_total"})
    else:
        values["lm_logprob"], values["lm_logprob_total"] = lm_logprob(lm, q_tokens)

    values["unk_count"] = float(count_unk(q_tokens, vocab))

    tv, k_eff, tv_missing = topk_variance(beam_results, k=topk)
    values["topk_var"] = tv
    values["topk_count"] = float(k_eff)
    if tv_missing:
        missing.add("topk_var")

    if seq_entropy_mc is None:
        values["seq_entropy_mc"] = 0.0
        missing.add("seq_entropy_mc")
    else:
        values["seq_entropy_mc"] = float(seq_entropy_mc)

    _, ent_avg, ent_max = token_entropies(pred)
    values["tok_entropy_avg"] = ent_avg
    values["tok_entropy_max"] = ent_max

    _validate(values)
    return FeatureVector(values=tuple(values[name] for name in FEATURE_NAMES),
                         missing=frozenset(missing))


def _validate(values: dict) -> None:
    for name in ("dropout_seq_var", "dropout_tok_avg", "dropout_tok_max",
                 "noise_add_seq_var", "noise_add_tok_avg", "noise_add_tok_max",
                 "noise_mul_seq_var", "noise_mul_tok_avg", "noise_mul_tok_max",
                 "topk_var", "seq_entropy_mc", "tok_entropy_avg", "tok_entropy_max"):
        if values[name] < 0:
            raise ValueError(f"{name} must be >= 0, got {values[name]}")
    if not 0.0 < values["min_token_prob"] <= 1.0:
        raise ValueError(f"min_token_prob must lie in (0, 1], "
                         f"got {values['min_token_prob']}")
    if values["unk_count"] < 0 or values["unk_count"] != int(values["unk_count"]):
        raise ValueError(f"unk_count must be a natural number, got {values['unk_count']}")
