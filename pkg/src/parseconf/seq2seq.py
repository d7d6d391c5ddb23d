"""Attention-based LSTM encoder-decoder for utterance-to-MR parsing.

The encoder consumes source token embeddings and produces one hidden vector
per token; the final states bridge into the decoder, which at each step
attends over the encoder outputs:

    r_{t,k} = softmax_k(d_t . e_k)
    c_t     = sum_k r_{t,k} e_k
    d_att   = tanh(W1 d_t + W2 c_t)
    p(a_t)  = softmax(Wo d_att)

and the sequence probability factorizes as the product of per-step
chosen-token probabilities. Training maximizes the log-likelihood with
RMSProp over analytically derived gradients (no autodiff framework).

Four vector families can be perturbed at inference time (token embeddings,
encoder outputs, bridge states, decoder states); the ``Perturber`` hook
keeps the clean path bitwise identical when no perturbation is configured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nncore import (
    Array,
    LstmParams,
    RngStream,
    derive_seed,
    dropout_mask,
    gaussian_perturb,
    lstm_step,
    sigmoid,
    softmax,
)

PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)
PAD, UNK, BOS, EOS = 0, 1, 2, 3

SITE_TOKEN = "token_vectors"
SITE_ENCODER = "encoder_outputs"
SITE_BRIDGE = "bridge"
SITE_DECODER = "decoding_vectors"
ALL_SITES = (SITE_TOKEN, SITE_ENCODER, SITE_BRIDGE, SITE_DECODER)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Source and target token tables with reserved pad/unk/bos/eos ids."""

    def __init__(self, src_itos: list[str], tgt_itos: list[str], min_freq: int = 1):
        for itos in (src_itos, tgt_itos):
            if tuple(itos[:4]) != RESERVED:
                raise ValueError(f"itos must start with reserved tokens {RESERVED}")
            if len(set(itos)) != len(itos):
                raise ValueError("duplicate tokens in vocabulary")
        self.src_itos = list(src_itos)
        self.tgt_itos = list(tgt_itos)
        self.min_freq = min_freq
        self._src_stoi = {tok: i for i, tok in enumerate(self.src_itos)}
        self._tgt_stoi = {tok: i for i, tok in enumerate(self.tgt_itos)}

    @property
    def src_size(self) -> int:
        return len(self.src_itos)

    @property
    def tgt_size(self) -> int:
        return len(self.tgt_itos)

    def encode_src(self, tokens: list[str]) -> list[int]:
        """Map source tokens to ids; out-of-vocabulary tokens become UNK."""
        return [self._src_stoi.get(tok, UNK) for tok in tokens]

    def encode_tgt(self, tokens: list[str]) -> list[int]:
        return [self._tgt_stoi.get(tok, UNK) for tok in tokens]

    def decode_tgt(self, ids) -> list[str]:
        return [self.tgt_itos[i] for i in ids]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocab) and self.src_itos == other.src_itos
                and self.tgt_itos == other.tgt_itos and self.min_freq == other.min_freq)


def build_vocab(pairs: list[tuple[list[str], list[str]]], min_freq: int = 4) -> Vocab:
    """Count tokens over training pairs and assemble the vocabulary.

    The frequency cutoff applies to source words only; the target side is a
    closed formal vocabulary and is kept whole.
    """
    src_counts: dict[str, int] = {}
    tgt_seen: dict[str, int] = {}
    for q, a in pairs:
        for tok in q:
            src_counts[tok] = src_counts.get(tok, 0) + 1
        for tok in a:
            tgt_seen[tok] = tgt_seen.get(tok, 0) + 1
    src = [t for t, c in sorted(src_counts.items(), key=lambda kv: (-kv[1], kv[0]))
           if c >= min_freq and t not in RESERVED]
    tgt = [t for t, _ in sorted(tgt_seen.items(), key=lambda kv: (-kv[1], kv[0]))
           if t not in RESERVED]
    return Vocab(list(RESERVED) + src, list(RESERVED) + tgt, min_freq=min_freq)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

PARAM_DOC = """Parameter names: src_embed, tgt_embed, enc{l}_W, enc{l}_b,
dec{l}_W, dec{l}_b (fused i/f/o/g gates), and the bias-free attention/output
matrices W1, W2, Wo."""


class Seq2SeqModel:
    """Encoder-decoder parameters plus the vocabulary they are tied to."""

    def __init__(self, vocab: Vocab, hidden: int, layers: int,
                 params: dict[str, Array]):
        self.vocab = vocab
        self.hidden = int(hidden)
        self.layers = int(layers)
        self._params = {name: np.asarray(arr, dtype=np.float64)
                        for name, arr in params.items()}
        self._check_shapes()

    def _check_shapes(self) -> None:
        n, L = self.hidden, self.layers
        expected = {"src_embed": (self.vocab.src_size, n),
                    "tgt_embed": (self.vocab.tgt_size, n),
                    "W1": (n, n), "W2": (n, n),
                    "Wo": (self.vocab.tgt_size, n)}
        for l in range(L):
            in_dim = n  # embeddings share the hidden width
            expected[f"enc{l}_W"] = (4 * n, in_dim + n)
            expected[f"enc{l}_b"] = (4 * n,)
            expected[f"dec{l}_W"] = (4 * n, in_dim + n)
            expected[f"dec{l}_b"] = (4 * n,)
        if set(expected) != set(self._params):
            raise ValueError(f"parameter set mismatch: {sorted(self._params)} "
                             f"vs expected {sorted(expected)}")
        for name, shape in expected.items():
            if self._params[name].shape != shape:
                raise ValueError(f"{name} has shape {self._params[name].shape}, "
                                 f"expected {shape}")

    def params(self) -> dict[str, Array]:
        """Live parameter arrays, keyed by name (mutating them mutates the model)."""
        return self._params

    def param(self, name: str) -> Array:
        return self._params[name]

    def enc_params(self, layer: int) -> LstmParams:
        return LstmParams(W=self._params[f"enc{layer}_W"], b=self._params[f"enc{layer}_b"])

    def dec_params(self, layer: int) -> LstmParams:
        return LstmParams(W=self._params[f"dec{layer}_W"], b=self._params[f"dec{layer}_b"])


def init_model(vocab: Vocab, hidden: int = 150, layers: int = 1, seed: int = 0) -> Seq2SeqModel:
    """Uniform(-0.08, 0.08) initialization of every parameter, seeded."""
    n = hidden
    shapes = {"src_embed": (vocab.src_size, n), "tgt_embed": (vocab.tgt_size, n),
              "W1": (n, n), "W2": (n, n), "Wo": (vocab.tgt_size, n)}
    for l in range(layers):
        shapes[f"enc{l}_W"] = (4 * n, 2 * n)
        shapes[f"enc{l}_b"] = (4 * n,)
        shapes[f"dec{l}_W"] = (4 * n, 2 * n)
        shapes[f"dec{l}_b"] = (4 * n,)
    params = {}
    for name in sorted(shapes):
        rng = RngStream(derive_seed(seed, "init", name))
        params[name] = rng.uniform(-0.08, 0.08, size=shapes[name])
    return Seq2SeqModel(vocab, hidden, layers, params)


# ---------------------------------------------------------------------------
# perturbation hook
# ---------------------------------------------------------------------------


@dataclass
class Perturber:
    """Applies dropout or Gaussian noise to configured vector sites.

    ``only_src_token`` switches to single-token mode: noise hits just the
    source embedding at that position and every other site stays clean.
    """

    kind: str                      # "dropout" or "gaussian"
    rng: RngStream
    sites: frozenset = frozenset(ALL_SITES)
    rate: float = 0.0              # dropout
    sigma: float = 0.0             # gaussian
    mode: str = "additive"         # gaussian
    only_src_token: int | None = None

    def __post_init__(self):
        if self.kind not in ("dropout", "gaussian"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        self.sites = frozenset(self.sites)
        unknown = self.sites - set(ALL_SITES)
        if unknown:
            raise ValueError(f"unknown perturbation sites {sorted(unknown)}")

    def apply(self, site: str, v: Array, side: str | None = None,
              pos: int | None = None) -> Array:
        if self.only_src_token is not None:
            if site != SITE_TOKEN or side != "src" or pos != self.only_src_token:
                return v
        elif site not in self.sites:
            return v
        if self.kind == "dropout":
            return v * dropout_mask(self.rate, v.shape[0], self.rng)
        return gaussian_perturb(v, self.sigma, self.mode, self.rng)


def _maybe(perturber: Perturber | None, site: str, v: Array,
           side: str | None = None, pos: int | None = None) -> Array:
    return v if perturber is None else perturber.apply(site, v, side=side, pos=pos)


# ---------------------------------------------------------------------------
# inference forward passes
# ---------------------------------------------------------------------------


@dataclass
class Encoding:
    """Encoder outputs: one row of E per source token plus the final states."""

    E: Array                 # (|q|, n), e_{|q|-1} is the bridge vector
    final_h: list[Array]
    final_c: list[Array]
    src_ids: list[int]
    src_tokens: list[str]


@dataclass
class DecState:
    h: list[Array]
    c: list[Array]


def encode(model: Seq2SeqModel, src_tokens: list[str],
           perturber: Perturber | None = None) -> Encoding:
    """Run the encoder over a tokenized utterance (OOV tokens become UNK)."""
    if not src_tokens:
        raise ValueError("cannot encode an empty source sequence")
    ids = model.vocab.encode_src(src_tokens)
    n, L = model.hidden, model.layers
    h = [np.zeros(n) for _ in range(L)]
    c = [np.zeros(n) for _ in range(L)]
    E = np.empty((len(ids), n))
    for t, tok in enumerate(ids):
        x = _maybe(perturber, SITE_TOKEN, model.param("src_embed")[tok], side="src", pos=t)
        inp = x
        for l in range(L):
            h[l], c[l] = lstm_step(h[l], c[l], inp, model.enc_params(l))
            inp = h[l]
        E[t] = _maybe(perturber, SITE_ENCODER, h[-1], pos=t)
    return Encoding(E=E, final_h=h, final_c=c, src_ids=ids, src_tokens=list(src_tokens))


def init_state(model: Seq2SeqModel, enc: Encoding,
               perturber: Perturber | None = None) -> DecState:
    """Bridge the encoder's final hidden and cell states into the decoder."""
    h = [_maybe(perturber, SITE_BRIDGE, enc.final_h[l], pos=l) for l in range(model.layers)]
    c = [_maybe(perturber, SITE_BRIDGE, enc.final_c[l], pos=l) for l in range(model.layers)]
    return DecState(h=h, c=c)


def decode_step(model: Seq2SeqModel, state: DecState, prev_token: int, E: Array,
                perturber: Perturber | None = None):
    """One decoder step.

    Returns (new_state, attention_row, attended_vector, distribution) where
    the attention row sums to one over the source positions and the
    distribution is the next-token softmax.
    """
    if E.shape[0] == 0:
        raise ValueError("decode_step needs at least one encoder state")
    x = _maybe(perturber, SITE_TOKEN, model.param("tgt_embed")[prev_token], side="tgt")
    inp = x
    new_h, new_c = [], []
    for l in range(model.layers):
        hl, cl = lstm_step(state.h[l], state.c[l], inp, model.dec_params(l))
        new_h.append(hl)
        new_c.append(cl)
        inp = hl
    d = _maybe(perturber, SITE_DECODER, new_h[-1])
    r = softmax(E @ d)
    ctx = r @ E
    d_att = np.tanh(model.param("W1") @ d + model.param("W2") @ ctx)
    dist = softmax(model.param("Wo") @ d_att)
    return DecState(h=new_h, c=new_c), r, d_att, dist


@dataclass
class TeacherForced:
    """Teacher-forced scoring of a fixed target sequence."""

    logprob: float
    token_probs: Array         # (|a|,)
    attention: Array           # (|a|, |q|)
    distributions: Array | None = None   # (|a|, |V_a|) when requested


def teacher_forced(model: Seq2SeqModel, src_tokens: list[str], tgt_ids: list[int],
                   perturber: Perturber | None = None,
                   keep_distributions: bool = False) -> TeacherForced:
    """Score a fixed target id sequence (which should end with EOS)."""
    enc = encode(model, src_tokens, perturber)
    state = init_state(model, enc, perturber)
    probs = np.empty(len(tgt_ids))
    attn = np.empty((len(tgt_ids), len(src_tokens)))
    dists = np.empty((len(tgt_ids), model.vocab.tgt_size)) if keep_distributions else None
    prev = BOS
    logprob = 0.0
    for t, y in enumerate(tgt_ids):
        state, r, _, dist = decode_step(model, state, prev, enc.E, perturber)
        probs[t] = dist[y]
        attn[t] = r
        if dists is not None:
            dists[t] = dist
        with np.errstate(divide="ignore"):
            logprob += float(np.log(dist[y]))
        prev = y
    return TeacherForced(logprob=logprob, token_probs=probs, attention=attn,
                         distributions=dists)


def sequence_logprob(model: Seq2SeqModel, src_tokens: list[str],
                     tgt_tokens: list[str]) -> float:
    """Log p(a|q) under teacher forcing; ``tgt_tokens`` must end with EOS."""
    if not tgt_tokens or tgt_tokens[-1] != EOS_TOKEN:
        raise ValueError(f"target sequence must end with {EOS_TOKEN}")
    ids = model.vocab.encode_tgt(tgt_tokens[:-1]) + [EOS]
    return teacher_forced(model, src_tokens, ids).logprob


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    """A decoded hypothesis.

    ``token_ids`` is the scored sequence including the terminating EOS when
    the hypothesis finished naturally; ``tokens`` is the surface form without
    EOS. Row t of ``distributions``/``attention`` belongs to the step that
    produced ``token_ids[t]``, and ``logprob`` equals the sum of the logs of
    ``token_probs`` exactly (the factorized sequence probability).
    """

    tokens: list[str]
    token_ids: list[int]
    distributions: Array
    token_probs: Array
    attention: Array
    logprob: float
    beam_rank: int
    finished: bool


@dataclass
class _Hyp:
    ids: tuple
    logprob: float
    state: DecState
    probs: tuple
    dists: tuple
    attn: tuple


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def beam_search(model: Seq2SeqModel, src_tokens: list[str], beam_size: int = 5,
                max_len: int | None = None,
                perturber: Perturber | None = None) -> list[Prediction]:
    """Beam decoding ranked by total log-probability (no length normalization).

    PAD and BOS are never proposed. A hypothesis completes at EOS; survivors
    at the length cap (2|q|+10 by default) are force-finished. Ties are
    broken toward the lexicographically smallest id sequence. ``beam_size=1``
    is greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    enc = encode(model, src_tokens, perturber)
    if max_len is None:
        max_len = default_max_len(len(src_tokens))
    start = _Hyp(ids=(), logprob=0.0, state=init_state(model, enc, perturber),
                 probs=(), dists=(), attn=())
    live = [start]
    finished: list[_Hyp] = []
    for _ in range(max_len):
        if not live:
            break
        if len(finished) >= beam_size:
            kth = sorted(finished, key=_hyp_order)[beam_size - 1].logprob
            if max(h.logprob for h in live) < kth:
                break
        candidates = []
        for hyp in live:
            prev = hyp.ids[-1] if hyp.ids else BOS
            state, r, _, dist = decode_step(model, hyp.state, prev, enc.E, perturber)
            with np.errstate(divide="ignore"):
                logdist = np.log(dist)
            for tok in range(model.vocab.tgt_size):
                if tok in (PAD, BOS):
                    continue
                candidates.append((hyp.logprob + float(logdist[tok]), hyp, tok,
                                   state, r, dist))
        candidates.sort(key=lambda c: (-c[0], c[1].ids + (c[2],)))
        live = []
        for lp, hyp, tok, state, r, dist in candidates[:beam_size]:
            new = _Hyp(ids=hyp.ids + (tok,), logprob=lp, state=state,
                       probs=hyp.probs + (float(dist[tok]),),
                       dists=hyp.dists + (dist,), attn=hyp.attn + (r,))
            if tok == EOS:
                finished.append(new)
            else:
                live.append(new)
    completed = [(h, True) for h in finished] + [(h, False) for h in live]
    completed.sort(key=lambda hf: _hyp_order(hf[0]))
    out = []
    for rank, (h, done) in enumerate(completed[:beam_size]):
        ids = list(h.ids)
        surface = ids[:-1] if done else ids
        out.append(Prediction(
            tokens=model.vocab.decode_tgt(surface),
            token_ids=ids,
            distributions=np.array(h.dists),
            token_probs=np.array(h.probs),
            attention=np.array(h.attn),
            logprob=h.logprob,
            beam_rank=rank,
            finished=done,
        ))
    return out


def _hyp_order(h: _Hyp):
    return (-h.logprob, h.ids)


def greedy_decode(model: Seq2SeqModel, src_tokens: list[str],
                  max_len: int | None = None) -> Prediction:
    return beam_search(model, src_tokens, beam_size=1, max_len=max_len)[0]


def sample_sequence(model: Seq2SeqModel, enc: Encoding, rng: RngStream,
                    max_len: int) -> tuple[tuple, float]:
    """Ancestral sample from the model's full sequence distribution."""
    state = init_state(model, enc)
    prev = BOS
    ids: tuple = ()
    logprob = 0.0
    for _ in range(max_len):
        state, _, _, dist = decode_step(model, state, prev, enc.E)
        tok = rng.choice_index(dist)
        ids += (tok,)
        logprob += float(np.log(dist[tok]))
        if tok == EOS:
            break
        prev = tok
    return ids, logprob


def replace_unk(pred: Prediction, src_tokens: list[str]) -> list[str]:
    """Swap each UNK output token for the source token its attention row picks.

    Ties in an attention row resolve to the lowest source position.
    """
    out = list(pred.tokens)
    for t, tok in enumerate(out):
        if tok == UNK_TOKEN:
            k = int(np.argmax(pred.attention[t]))
            out[t] = src_tokens[k]
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.002
    rms_decay: float = 0.95
    dropout: float = 0.25
    epochs: int = 15
    clip_norm: float = 5.0
    seed: int = 0
    rms_eps: float = 1e-8
    max_src_len: int = 80
    max_tgt_len: int = 80


@dataclass
class TrainLog:
    train_nll: list[float] = field(default_factory=list)   # per-token, per epoch
    dev_nll: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class _LstmCache:
    xh: Array
    i: Array
    f: Array
    o: Array
    g: Array
    c_prev: Array
    c: Array
    tanh_c: Array
    h: Array


def _lstm_forward(h_prev: Array, c_prev: Array, x: Array, params: LstmParams) -> _LstmCache:
    # Same math as nncore.lstm_step, with intermediates kept for the backward pass.
    n = params.hidden_size
    xh = np.concatenate([x, h_prev])
    pre = params.W @ xh + params.b
    i = sigmoid(pre[:n])
    f = sigmoid(pre[n:2 * n])
    o = sigmoid(pre[2 * n:3 * n])
    g = np.tanh(pre[3 * n:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return _LstmCache(xh=xh, i=i, f=f, o=o, g=g, c_prev=c_prev, c=c, tanh_c=tanh_c, h=h)


def _lstm_backward(cache: _LstmCache, dh: Array, dc: Array, params: LstmParams,
                   acc: list) -> tuple[Array, Array, Array]:
    """Collect this step's gate gradient; return (dx, dh_prev, dc_prev).

    Weight gradients are not formed here: (dpre, xh) pairs land in ``acc``
    and the caller contracts them in one matmul per sequence, which is far
    cheaper than a rank-1 update per step.
    """
    n = params.hidden_size
    do = dh * cache.tanh_c
    dc_tot = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    di = dc_tot * cache.g
    df = dc_tot * cache.c_prev
    dg = dc_tot * cache.i
    dc_prev = dc_tot * cache.f
    dpre = np.concatenate([
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        do * cache.o * (1.0 - cache.o),
        dg * (1.0 - cache.g ** 2),
    ])
    acc.append((dpre, cache.xh))
    dxh = params.W.T @ dpre
    return dxh[:-n], dxh[-n:], dc_prev


def _contract(acc: list) -> tuple[Array, Array]:
    """(sum of outer(dpre, xh), sum of dpre) over collected steps."""
    dpres = np.stack([a for a, _ in acc])
    xhs = np.stack([b for _, b in acc])
    return dpres.T @ xhs, dpres.sum(axis=0)


@dataclass
class _Masks:
    src_tok: Array
    enc_out: Array
    bridge_h: Array
    bridge_c: Array
    tgt_tok: Array
    dec_out: Array


def _draw_masks(rate: float, K: int, T: int, L: int, n: int, rng: RngStream) -> _Masks:
    def block(rows):
        return np.stack([dropout_mask(rate, n, rng) for _ in range(rows)])
    return _Masks(src_tok=block(K), enc_out=block(K), bridge_h=block(L),
                  bridge_c=block(L), tgt_tok=block(T), dec_out=block(T))


def loss_and_grads(model: Seq2SeqModel, src_ids: list[int], tgt_ids: list[int],
                   masks: _Masks | None = None) -> tuple[float, dict[str, Array]]:
    """Sequence NLL and its analytic gradient for one teacher-forced example."""
    n, L = model.hidden, model.layers
    K, T = len(src_ids), len(tgt_ids)
    P = model.params()
    grads = {"src_embed": np.zeros_like(P["src_embed"]),
             "tgt_embed": np.zeros_like(P["tgt_embed"])}

    # Encoder forward.
    enc_cache: list[list[_LstmCache]] = []
    h = [np.zeros(n) for _ in range(L)]
    c = [np.zeros(n) for _ in range(L)]
    E = np.empty((K, n))
    for t in range(K):
        x = P["src_embed"][src_ids[t]]
        if masks is not None:
            x = x * masks.src_tok[t]
        inp = x
        step_caches = []
        for l in range(L):
            cache = _lstm_forward(h[l], c[l], inp, model.enc_params(l))
            h[l], c[l] = cache.h, cache.c
            step_caches.append(cache)
            inp = cache.h
        enc_cache.append(step_caches)
        E[t] = h[-1] * masks.enc_out[t] if masks is not None else h[-1]

    # Bridge into the decoder.
    if masks is not None:
        dh0 = [h[l] * masks.bridge_h[l] for l in range(L)]
        dc0 = [c[l] * masks.bridge_c[l] for l in range(L)]
    else:
        dh0, dc0 = [hl.copy() for hl in h], [cl.copy() for cl in c]

    # Decoder forward.
    dec_cache: list[list[_LstmCache]] = []
    steps = []
    hd, cd = dh0, dc0
    prev = BOS
    loss = 0.0
    for t in range(T):
        x = P["tgt_embed"][prev]
        if masks is not None:
            x = x * masks.tgt_tok[t]
        inp = x
        step_caches = []
        hd, cd = list(hd), list(cd)
        for l in range(L):
            cache = _lstm_forward(hd[l], cd[l], inp, model.dec_params(l))
            hd[l], cd[l] = cache.h, cache.c
            step_caches.append(cache)
            inp = cache.h
        dec_cache.append(step_caches)
        d = hd[-1] * masks.dec_out[t] if masks is not None else hd[-1]
        r = softmax(E @ d)
        ctx = r @ E
        d_att = np.tanh(P["W1"] @ d + P["W2"] @ ctx)
        p = softmax(P["Wo"] @ d_att)
        y = tgt_ids[t]
        with np.errstate(divide="ignore"):
            loss -= float(np.log(p[y]))
        steps.append((prev, y, d, r, ctx, d_att, p))
        prev = y

    # Decoder backward. Rank-1 weight updates are batched: per-step factors
    # collect into lists and contract once per sequence.
    dh_carry = [np.zeros(n) for _ in range(L)]
    dc_carry = [np.zeros(n) for _ in range(L)]
    out_acc = {"dlogits": [], "d_att": [], "dz": [], "d": [], "ctx": [],
               "r": [], "dctx": [], "ds": []}
    dec_acc: list[list] = [[] for _ in range(L)]
    for t in reversed(range(T)):
        prev, y, d, r, ctx, d_att, p = steps[t]
        dlogits = p.copy()
        dlogits[y] -= 1.0
        dz = (P["Wo"].T @ dlogits) * (1.0 - d_att ** 2)
        dd = P["W1"].T @ dz
        dctx = P["W2"].T @ dz
        dr = E @ dctx
        ds = r * (dr - float(r @ dr))
        dd += E.T @ ds
        for key, val in (("dlogits", dlogits), ("d_att", d_att), ("dz", dz),
                         ("d", d), ("ctx", ctx), ("r", r), ("dctx", dctx),
                         ("ds", ds)):
            out_acc[key].append(val)
        if masks is not None:
            dd = dd * masks.dec_out[t]
        dh_step = dd
        for l in reversed(range(L)):
            dh_tot = dh_carry[l] + dh_step
            dx, dh_prev, dc_prev = _lstm_backward(
                dec_cache[t][l], dh_tot, dc_carry[l], model.dec_params(l),
                dec_acc[l])
            dh_carry[l], dc_carry[l] = dh_prev, dc_prev
            dh_step = dx
        if masks is not None:
            dx = dx * masks.tgt_tok[t]
        grads["tgt_embed"][prev] += dx
    stacked = {key: np.stack(vals) for key, vals in out_acc.items()}
    grads["Wo"] = stacked["dlogits"].T @ stacked["d_att"]
    grads["W1"] = stacked["dz"].T @ stacked["d"]
    grads["W2"] = stacked["dz"].T @ stacked["ctx"]
    dE = stacked["r"].T @ stacked["dctx"] + stacked["ds"].T @ stacked["d"]
    for l in range(L):
        grads[f"dec{l}_W"], grads[f"dec{l}_b"] = _contract(dec_acc[l])

    # Bridge backward.
    if masks is not None:
        dh_enc = [dh_carry[l] * masks.bridge_h[l] for l in range(L)]
        dc_enc = [dc_carry[l] * masks.bridge_c[l] for l in range(L)]
    else:
        dh_enc, dc_enc = dh_carry, dc_carry

    # Encoder backward.
    enc_acc: list[list] = [[] for _ in range(L)]
    for t in reversed(range(K)):
        dtop = dE[t] * masks.enc_out[t] if masks is not None else dE[t]
        dh_step = dtop
        for l in reversed(range(L)):
            dh_tot = dh_enc[l] + dh_step
            dx, dh_prev, dc_prev = _lstm_backward(
                enc_cache[t][l], dh_tot, dc_enc[l], model.enc_params(l),
                enc_acc[l])
            dh_enc[l], dc_enc[l] = dh_prev, dc_prev
            dh_step = dx
        if masks is not None:
            dx = dx * masks.src_tok[t]
        grads["src_embed"][src_ids[t]] += dx
    for l in range(L):
        grads[f"enc{l}_W"], grads[f"enc{l}_b"] = _contract(enc_acc[l])

    return loss, grads


def _clip_grads(grads: dict[str, Array], clip_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if clip_norm > 0 and total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total

def mean_nll(model: Seq2SeqModel, pairs: list[tuple[list[str], list[str]]]) -> float:
    """Mean per-token negative log-likelihood (clean, teacher-forced)."""
    total, count = 0.0, 0
    for q, a in pairs:
        ids = model.vocab.encode_tgt(a) + [EOS]
        total -= teacher_forced(model, q, ids).logprob
        count += len(ids)
    return total / max(count, 1)


def train(model: Seq2SeqModel, train_pairs: list[tuple[list[str], list[str]]],
          dev_pairs: list[tuple[list[str], list[str]]] | None = None,
          cfg: TrainConfig = TrainConfig(),
          checkpoint_dir: str | Path | None = None) -> TrainLog:
    """RMSProp training over single-example analytic gradients.

    Mutates the model in place and returns per-epoch train/dev losses.
    Aborts with a diagnostic on a non-finite loss. When ``checkpoint_dir``
    is given, the latest model is persisted each epoch and the best dev
    model under best.json.
    """
    if not train_pairs:
        raise ValueError("training corpus is empty")
    for q, a in train_pairs:
        if not q or not a:
            raise ValueError("empty sequence in training pair")
        if len(q) > cfg.max_src_len or len(a) + 1 > cfg.max_tgt_len:
            raise ValueError(f"pair exceeds length caps ({cfg.max_src_len}, "
                             f"{cfg.max_tgt_len}): {len(q)}, {len(a) + 1}")
    encoded = [(model.vocab.encode_src(q), model.vocab.encode_tgt(a) + [EOS])
               for q, a in train_pairs]
    rms = {name: np.zeros_like(arr) for name, arr in model.params().items()}
    scratch = {name: np.empty_like(arr) for name, arr in model.params().items()}
    rng = RngStream(derive_seed(cfg.seed, "train"))
    log = TrainLog()
    best_dev = np.inf
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        order = list(range(len(encoded)))
        rng.shuffle(order)
        epoch_nll, epoch_tokens = 0.0, 0
        for idx in order:
            src_ids, tgt_ids = encoded[idx]
            masks = None
            if cfg.dropout > 0:
                masks = _draw_masks(cfg.dropout, len(src_ids), len(tgt_ids),
                                    model.layers, model.hidden, rng)
            loss, grads = loss_and_grads(model, src_ids, tgt_ids, masks)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, example {idx}; "
                                   "lower the learning rate or check the data")
            epoch_nll += loss
            epoch_tokens += len(tgt_ids)
            _clip_grads(grads, cfg.clip_norm)
            for name, g in grads.items():
                cache, tmp = rms[name], scratch[name]
                cache *= cfg.rms_decay
                np.multiply(g, g, out=tmp)
                tmp *= 1.0 - cfg.rms_decay
                cache += tmp
                np.sqrt(cache, out=tmp)
                tmp += cfg.rms_eps
                np.divide(g, tmp, out=tmp)
                tmp *= cfg.lr
                model.params()[name] -= tmp
        log.train_nll.append(epoch_nll / max(epoch_tokens, 1))
        if dev_pairs:
            dev = mean_nll(model, dev_pairs)
            log.dev_nll.append(dev)
            if dev < best_dev:
                best_dev = dev
                log.best_epoch = epoch
                if ckpt is not None:
                    save_checkpoint(model, ckpt / "best.json")
        if ckpt is not None:
            save_checkpoint(model, ckpt / "last.json")
    return log


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "seq2seq-checkpoint-v1"


def save_checkpoint(model: Seq2SeqModel, path: str | Path,
                    extra: dict | None = None) -> None:
    """Persist vocab, shapes, and parameters as JSON (bit-exact round trip).

    ``extra`` keys are merged into the payload for provenance stamps; the
    loader ignores them.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "hidden": model.hidden,
        "layers": model.layers,
        "min_freq": model.vocab.min_freq,
        "src_itos": model.vocab.src_itos,
        "tgt_itos": model.vocab.tgt_itos,
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in sorted(model.params().items())},
    }
    for key, val in (extra or {}).items():
        if key in payload:
            raise ValueError(f"extra key {key!r} collides with the checkpoint payload")
        payload[key] = val
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Seq2SeqModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    vocab = Vocab(payload["src_itos"], payload["tgt_itos"], payload["min_freq"])
    params = {name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
              for name, spec in payload["params"].items()}
    return Seq2SeqModel(vocab, payload["hidden"], payload["layers"], params)
