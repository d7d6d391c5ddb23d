"""Test-time perturbation harness.

Runs F teacher-forced forward passes over a fixed (utterance, prediction)
pair, each pass with fresh dropout masks or Gaussian noise at the configured
vector sites, and collects per-pass sequence and token probabilities. The
prediction itself is never re-decoded: perturbation changes the probability
assigned to the fixed token sequence, not the sequence.

Pass i draws its randomness from a seed derived as (seed, "pass", i), so
runs are bit-reproducible across processes and the passes are independent
of each other (they could execute in any order or in parallel).

Note: full-input noise variance is not guaranteed to dominate the largest
single-token noise variance (sites interact), so no such invariant is
asserted anywhere; runs simply record what happened.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Array, RngStream, derive_seed
from .seq2seq import ALL_SITES, Perturber, Seq2SeqModel, teacher_forced


@dataclass
class PerturbConfig:
    """Settings for one perturbation run (defaults mirror the scoring setup)."""

    passes: int = 30
    kind: str = "dropout"          # "dropout" or "gaussian"
    rate: float = 0.1              # dropout rate
    sigma: float = 0.05            # gaussian noise scale
    mode: str = "additive"         # gaussian: "additive" or "multiplicative"
    sites: tuple = ALL_SITES
    seed: int = 0


@dataclass
class PerturbationRun:
    """Per-pass probabilities for a fixed (q, a) pair.

    ``token_probs[i, t]`` is pass i's probability of the t-th prediction
    token given the gold-forced prefix; all entries lie in (0, 1].
    """

    passes: int
    kind: str
    sites: tuple
    params: dict
    seed: int
    seq_probs: Array       # (F,)
    seq_logprobs: Array    # (F,)
    token_probs: Array     # (F, |a|)


def _run(model: Seq2SeqModel, src_tokens: list[str], tgt_ids: list[int],
         passes: int, seed: int, make_perturber) -> tuple[Array, Array]:
    if passes < 2:
        raise ValueError("need at least 2 passes to estimate variance")
    if not tgt_ids:
        raise ValueError("cannot score an empty prediction")
    token_probs = np.empty((passes, len(tgt_ids)))
    seq_logprobs = np.empty(passes)
    for i in range(passes):
        rng = RngStream(derive_seed(seed, "pass", i))
        tf = teacher_forced(model, src_tokens, tgt_ids, perturber=make_perturber(rng))
        token_probs[i] = tf.token_probs
        seq_logprobs[i] = tf.logprob
    return token_probs, seq_logprobs


def perturbed_passes(model: Seq2SeqModel, src_tokens: list[str], tgt_ids: list[int],
                     cfg: PerturbConfig = PerturbConfig()) -> PerturbationRun:
    """Score a fixed prediction under F perturbed forward passes."""
    def make(rng: RngStream) -> Perturber:
        return Perturber(kind=cfg.kind, rng=rng, sites=frozenset(cfg.sites),
                         rate=cfg.rate, sigma=cfg.sigma, mode=cfg.mode)

    token_probs, seq_logprobs = _run(model, src_tokens, tgt_ids,
                                     cfg.passes, cfg.seed, make)
    params = ({"rate": cfg.rate} if cfg.kind == "dropout"
              else {"sigma": cfg.sigma, "mode": cfg.mode})
    return PerturbationRun(passes=cfg.passes, kind=cfg.kind, sites=tuple(cfg.sites),
                           params=params, seed=cfg.seed,
                           seq_probs=np.exp(seq_logprobs), seq_logprobs=seq_logprobs,
                           token_probs=token_probs)


def per_token_noise_passes(model: Seq2SeqModel, src_tokens: list[str],
                           tgt_ids: list[int], token_index: int, sigma: float,
                           passes: int = 30, seed: int = 0,
                           mode: str = "additive") -> PerturbationRun:
    """Gaussian noise on the embedding of one source token only.

    Every other site stays clean, which makes the run's variance a measure
    of how much that single input token drives the prediction.
    """
    if not 0 <= token_index < len(src_tokens):
        raise ValueError(f"token_index {token_index} out of range for "
                         f"{len(src_tokens)} source tokens")

    def make(rng: RngStream) -> Perturber:
        return Perturber(kind="gaussian", rng=rng, sigma=sigma, mode=mode,
                         only_src_token=token_index)

    token_probs, seq_logprobs = _run(model, src_tokens, tgt_ids, passes, seed, make)
    return PerturbationRun(passes=passes, kind="gaussian",
                           sites=("token_vectors",),
                           params={"sigma": sigma, "mode": mode,
                                   "token_index": token_index},
                           seed=seed, seq_probs=np.exp(seq_logprobs),
                           seq_logprobs=seq_logprobs, token_probs=token_probs)
