"""Uncertainty backpropagation: trace a prediction, then push per-output
uncertainty backward to the input tokens.

The decode of a fixed prediction is re-run through the trace recorder, each
output step's uncertainty (the perturbation variance of its token
probability) is placed on the pre-softmax logit neuron of the predicted
token, and the mass is redistributed backward through the graph:

* affine z = Wx + b: input share proportional to |W_ik * x_k| per output
  neuron (nonlinearity and bias ignored);
* add/sub: shares proportional to |x_k| and |y_k|;
* elementwise product: shares proportional to |log|x_k|| and |log|y_k||, so
  the two factors of (1/3) * 3 contribute equally;
* scalar multiplication and pointwise nonlinearities: pass-through.

Every rule conserves mass, so the total arriving at leaves equals the
initialized total. Mass on source-embedding leaves aggregates into
normalized per-input-token scores; mass on other leaves (initial states,
previous-token embeddings) is absorbed and reported as a fraction. The
attention baseline reuses the same initialization with soft alignments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import token_uncertainty
from .nncore import Array, TracedGraph, softmax
from .perturb import PerturbationRun
from .seq2seq import BOS, Prediction, Seq2SeqModel

CLAMP_LO = 1e-12
CLAMP_HI = 1e12

TAG_SRC = "src"
TAG_PREV = "prev"
TAG_STATE = "state"

METHOD_BACKPROP = "backprop"
METHOD_ATTENTION = "attention"


# ---------------------------------------------------------------------------
# tracing
# ---------------------------------------------------------------------------


@dataclass
class InterpretTrace:
    """Traced decode of one prediction, with the handles backprop needs."""

    graph: TracedGraph
    src_tokens: list
    token_ids: list
    src_nodes: list        # leaf node id per source position
    logit_nodes: list      # pre-softmax affine node id per output step
    attention: Array       # (T, |q|) rows of soft alignments
    distributions: Array   # (T, |V_a|) step softmaxes
    token_probs: Array     # (T,) probability of each predicted token


def trace_prediction(model: Seq2SeqModel, src_tokens: list[str],
                     token_ids: list[int]) -> InterpretTrace:
    """Re-run a clean decode of ``token_ids`` under the trace recorder.

    The attention softmax and its dot-product score path stay outside the
    graph: each context vector enters as per-position scalar multiplications
    by the (constant) attention weights plus a summation, so uncertainty
    reaches the encoder states without needing a softmax rule.
    """
    if not src_tokens:
        raise ValueError("cannot trace an empty source sequence")
    if not token_ids:
        raise ValueError("cannot trace an empty prediction")
    g = TracedGraph()
    n, L = model.hidden, model.layers
    src_ids = model.vocab.encode_src(list(src_tokens))

    h = [g.leaf(np.zeros(n), tag=(TAG_STATE, "enc_h", l)) for l in range(L)]
    c = [g.leaf(np.zeros(n), tag=(TAG_STATE, "enc_c", l)) for l in range(L)]
    src_nodes = []
    enc_nodes = []
    for k, tok in enumerate(src_ids):
        x = g.leaf(model.param("src_embed")[tok], tag=(TAG_SRC, k))
        src_nodes.append(x)
        inp = x
        for l in range(L):
            h[l], c[l] = g.lstm_step(model.enc_params(l), h[l], c[l], inp)
            inp = h[l]
        enc_nodes.append(h[-1])
    E = np.stack([g.value(e) for e in enc_nodes])

    dh, dc = list(h), list(c)
    T = len(token_ids)
    logit_nodes = []
    attention = np.empty((T, len(src_ids)))
    distributions = np.empty((T, model.vocab.tgt_size))
    token_probs = np.empty(T)
    prev = BOS
    for t, y in enumerate(token_ids):
        x = g.leaf(model.param("tgt_embed")[prev], tag=(TAG_PREV, t))
        inp = x
        for l in range(L):
            dh[l], dc[l] = g.lstm_step(model.dec_params(l), dh[l], dc[l], inp)
            inp = dh[l]
        d = dh[-1]
        r = softmax(E @ g.value(d))
        terms = [g.scalar_mul(float(r[k]), enc_nodes[k]) for k in range(len(enc_nodes))]
        ctx = terms[0] if len(terms) == 1 else g.add(*terms)
        d_att = g.pointwise("tanh", g.add(g.affine(model.param("W1"), d),
                                          g.affine(model.param("W2"), ctx)))
        logits = g.affine(model.param("Wo"), d_att)
        dist = softmax(g.value(logits))

        logit_nodes.append(logits)
        attention[t] = r
        distributions[t] = dist
        token_probs[t] = dist[y]
        prev = y
    return InterpretTrace(graph=g, src_tokens=list(src_tokens),
                          token_ids=list(token_ids), src_nodes=src_nodes,
                          logit_nodes=logit_nodes, attention=attention,
                          distributions=distributions, token_probs=token_probs)


# ---------------------------------------------------------------------------
# uncertainty state and redistribution
# ---------------------------------------------------------------------------


@dataclass
class UncertaintyState:
    """Per-neuron uncertainty mass aligned with the trace's node list."""

    scores: list
    initialized_mass: float
    output_uncertainty: Array

    def node_total(self, idx: int) -> float:
        return float(np.sum(self.scores[idx]))


def output_token_uncertainty(run: PerturbationRun) -> Array:
    """Per-output-token uncertainty u_a: variance of the token probability."""
    return token_uncertainty(run)[0]


def seed_state(graph: TracedGraph, masses: dict) -> UncertaintyState:
    """Blank state over a graph with ``masses`` {node id: score array} placed."""
    scores = [np.zeros_like(node.value) for node in graph.nodes]
    total = 0.0
    for idx, m in masses.items():
        m = np.asarray(m, dtype=np.float64)
        if np.any(m < 0):
            raise ValueError("uncertainty scores must be >= 0")
        scores[idx] += m
        total += float(np.sum(m))
    return UncertaintyState(scores=scores, initialized_mass=total,
                            output_uncertainty=np.array([]))


def init_uncertainty(trace: InterpretTrace, u_outputs) -> UncertaintyState:
    """Place each step's uncertainty on the predicted token's logit neuron."""
    u = np.asarray(u_outputs, dtype=np.float64)
    if u.shape != (len(trace.token_ids),):
        raise ValueError(f"need one uncertainty per output token: "
                         f"{u.shape} vs {len(trace.token_ids)} tokens")
    if np.any(u < 0):
        raise ValueError("uncertainty scores must be >= 0")
    scores = [np.zeros_like(node.value) for node in trace.graph.nodes]
    for t, (node_id, tok) in enumerate(zip(trace.logit_nodes, trace.token_ids)):
        scores[node_id][tok] += u[t]
    return UncertaintyState(scores=scores, initialized_mass=float(np.sum(u)),
                            output_uncertainty=u)


def _affine_shares(W: Array, x: Array, u: Array) -> Array:
    """Mass reaching each input of z = Wx + b; zero rows split uniformly."""
    A = np.abs(W) * np.abs(x)[None, :]
    s = A.sum(axis=1)
    zero = s == 0.0
    shares = np.empty_like(A)
    if np.any(~zero):
        shares[~zero] = A[~zero] / s[~zero, None]
    if np.any(zero):
        shares[zero] = 1.0 / A.shape[1]
    return shares.T @ u


def _abs_shares(vals: list, u: Array) -> list:
    """|x|-proportional elementwise split; all-zero columns split uniformly."""
    stack = np.abs(np.stack(vals))
    s = stack.sum(axis=0)
    zero = s == 0.0
    out = []
    for row in stack:
        w = np.empty_like(row)
        w[~zero] = row[~zero] / s[~zero]
        w[zero] = 1.0 / stack.shape[0]
        out.append(w * u)
    return out


def _log_shares(x: Array, y: Array, u: Array) -> tuple[Array, Array]:
    """|log|x||-proportional split for z = x * y; 1-vs-1 magnitudes tie 50/50."""
    wx = np.abs(np.log(np.clip(np.abs(x), CLAMP_LO, CLAMP_HI)))
    wy = np.abs(np.log(np.clip(np.abs(y), CLAMP_LO, CLAMP_HI)))
    # Both fractions computed directly from s so swapping x and y swaps the
    # shares bitwise (IEEE addition is commutative).
    s = wx + wy
    zero = s == 0.0
    fx = np.empty_like(wx)
    fy = np.empty_like(wy)
    fx[~zero] = wx[~zero] / s[~zero]
    fy[~zero] = wy[~zero] / s[~zero]
    fx[zero] = 0.5
    fy[zero] = 0.5
    return fx * u, fy * u


def backprop_uncertainty(trace, state: UncertaintyState) -> UncertaintyState:
    """Redistribute node uncertainty to inputs in reverse topological order.

    Each node's mass is fully gathered from its consumers before it
    redistributes (the node list is a topological order, so a reverse sweep
    guarantees this). Leaves only receive. ``trace`` may be a full
    InterpretTrace or a bare TracedGraph.
    """
    g = trace.graph if isinstance(trace, InterpretTrace) else trace
    scores = state.scores
    for node in reversed(g.nodes):
        u = scores[node.idx]
        if node.kind == "leaf" or not np.any(u):
            continue
        vals = [g.value(i) for i in node.inputs]
        if node.kind == "affine":
            scores[node.inputs[0]] += _affine_shares(node.weight, vals[0], u)
        elif node.kind in ("add", "sub"):
            for i, part in zip(node.inputs, _abs_shares(vals, u)):
                scores[i] += part
        elif node.kind == "elemwise_mul":
            ux, uy = _log_shares(vals[0], vals[1], u)
            scores[node.inputs[0]] += ux
            scores[node.inputs[1]] += uy
        elif node.kind in ("scalar_mul", "pointwise_nonlin"):
            scores[node.inputs[0]] += u
        elif node.kind == "concat":
            offset = 0
            for i, v in zip(node.inputs, vals):
                scores[i] += u[offset:offset + len(v)]
                offset += len(v)
        elif node.kind == "select":
            np.add.at(scores[node.inputs[0]], node.indices, u)
        else:
            raise ValueError(f"no redistribution rule for node kind {node.kind!r}")
    return state


def leaf_mass(trace: InterpretTrace, state: UncertaintyState) -> tuple[Array, float]:
    """(per-source-token mass, mass absorbed by non-source leaves)."""
    raw = np.array([state.node_total(i) for i in trace.src_nodes])
    absorbed = sum(state.node_total(n.idx) for n in trace.graph.leaves()
                   if n.idx not in set(trace.src_nodes))
    return raw, float(absorbed)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class UncertaintyReport:
    """Normalized input-token uncertainty attribution."""

    tokens: list
    u_hat: Array
    raw: Array
    output_uncertainty: Array
    method: str
    uniform_fallback: bool = False
    absorbed_fraction: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"tokens": list(self.tokens),
                "u_hat": [float(v) for v in self.u_hat],
                "raw": [float(v) for v in self.raw],
                "output_uncertainty": [float(v) for v in self.output_uncertainty],
                "method": self.method,
                "uniform_fallback": self.uniform_fallback,
                "absorbed_fraction": self.absorbed_fraction,
                "extra": self.extra}

    @classmethod
    def from_json_dict(cls, d: dict) -> "UncertaintyReport":
        return cls(tokens=list(d["tokens"]), u_hat=np.array(d["u_hat"]),
                   raw=np.array(d["raw"]),
                   output_uncertainty=np.array(d["output_uncertainty"]),
                   method=d["method"], uniform_fallback=d["uniform_fallback"],
                   absorbed_fraction=d["absorbed_fraction"], extra=d["extra"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _normalize(tokens, raw: Array, u_out: Array, method: str,
               absorbed: float, initialized: float) -> UncertaintyReport:
    total = float(np.sum(raw))
    if total <= 0.0:
        u_hat = np.full(len(tokens), 1.0 / len(tokens))
        fallback = True
    else:
        u_hat = raw / total
        fallback = False
    frac = absorbed / initialized if initialized > 0 else 0.0
    return UncertaintyReport(tokens=list(tokens), u_hat=u_hat, raw=raw,
                             output_uncertainty=u_out, method=method,
                             uniform_fallback=fallback, absorbed_fraction=frac)


def aggregate_tokens(trace: InterpretTrace,
                     state: UncertaintyState) -> UncertaintyReport:
    """Sum leaf mass per source token and normalize to one.

    Zero total source mass (a perfectly stable prediction) falls back to the
    uniform distribution with a flag instead of dividing by zero.
    """
    raw, absorbed = leaf_mass(trace, state)
    return _normalize(trace.src_tokens, raw, state.output_uncertainty,
                      METHOD_BACKPROP, absorbed, state.initialized_mass)


def backprop_interpretation(model: Seq2SeqModel, src_tokens: list[str],
                            pred: Prediction,
                            run: PerturbationRun) -> UncertaintyReport:
    """Full pipeline: trace, initialize from the run's variances, backprop."""
    trace = trace_prediction(model, src_tokens, list(pred.token_ids))
    state = init_uncertainty(trace, output_token_uncertainty(run))
    backprop_uncertainty(trace, state)
    return aggregate_tokens(trace, state)


def attention_interpretation(src_tokens: list[str], pred: Prediction,
                             run: PerturbationRun) -> UncertaintyReport:
    """Soft-alignment baseline: u_hat_k proportional to sum_t r_tk * u_at."""
    u = output_token_uncertainty(run)
    r = np.asarray(pred.attention, dtype=np.float64)
    if r.shape != (len(u), len(src_tokens)):
        raise ValueError(f"attention shape {r.shape} does not match "
                         f"{len(u)} steps x {len(src_tokens)} tokens")
    raw = r.T @ u
    return _normalize(src_tokens, raw, u, METHOD_ATTENTION,
                      absorbed=0.0, initialized=float(np.sum(u)))
