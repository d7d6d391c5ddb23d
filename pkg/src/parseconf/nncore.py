"""Dense float64 primitives, seeded RNG streams, and a forward-pass trace recorder.

Everything downstream (the parser, the perturbation harness, the uncertainty
interpreter) is built on the handful of vector operations defined here. The
``TracedGraph`` records a forward computation as vector-valued nodes with
enough structure (operator kind, inputs, recorded values, weights) that
per-operator redistribution rules can be applied to it afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

MASK64 = 0xFFFFFFFFFFFFFFFF


def derive_seed(root: int, *labels) -> int:
    """Derive a stable 64-bit child seed from a root seed and labels."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & MASK64


class RngStream:
    """Seeded random stream; identical seed produces the identical sequence.

    ``counter`` tracks how many draw calls have been made, which makes replay
    mismatches easy to localize when debugging determinism issues.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0
        self._gen = np.random.default_rng(self.seed)

    def normal(self, size=None) -> Array:
        self.counter += 1
        return self._gen.standard_normal(size=size)

    def random(self, size=None) -> Array:
        self.counter += 1
        return self._gen.random(size=size)

    def uniform(self, low: float, high: float, size=None) -> Array:
        self.counter += 1
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def choice_index(self, probs: Array) -> int:
        """Draw one index from a probability vector via inverse CDF."""
        self.counter += 1
        u = self._gen.random()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))

    def shuffle(self, items: list) -> None:
        self.counter += 1
        self._gen.shuffle(items)

    def derive(self, *labels) -> "RngStream":
        """Child stream with a seed derived from this stream's seed and labels."""
        return RngStream(derive_seed(self.seed, *labels))


# ---------------------------------------------------------------------------
# vector primitives
# ---------------------------------------------------------------------------


def sigmoid(x: Array) -> Array:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: Array) -> Array:
    """Softmax with max-subtraction; outputs are positive and sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax requires finite entries")
    z = np.exp(x - np.max(x))
    return z / np.sum(z)


POINTWISE_FNS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def pointwise(fn: str, x: Array) -> Array:
    """Elementwise nonlinearity; ``fn`` is one of ``sigmoid`` or ``tanh``."""
    if fn not in POINTWISE_FNS:
        raise ValueError(f"unknown pointwise function {fn!r}")
    return POINTWISE_FNS[fn](np.asarray(x, dtype=np.float64))


def affine(W: Array, x: Array, b: Array | None = None) -> Array:
    """z = W @ x + b with hard dimension checks."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ValueError(f"affine dimension mismatch: W {W.shape}, x {x.shape}")
    z = W @ x
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ValueError(f"affine bias mismatch: W {W.shape}, b {b.shape}")
        z = z + b
    return z


@dataclass
class LstmParams:
    """Fused gate parameters for one LSTM layer.

    ``W`` has shape (4H, D+H) over the concatenated input [x; h_prev] and
    ``b`` shape (4H,). Gate row order is input, forget, output, candidate.
    """

    W: Array
    b: Array

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    def gate_rows(self, gate: int) -> tuple[Array, Array]:
        """Weight/bias rows for one gate (0=i, 1=f, 2=o, 3=g)."""
        h = self.hidden_size
        return self.W[gate * h:(gate + 1) * h], self.b[gate * h:(gate + 1) * h]


def lstm_step(prev_h: Array, prev_c: Array, x: Array, params: LstmParams) -> tuple[Array, Array]:
    """One LSTM step: c = f*prev_c + i*g, h = o*tanh(c)."""
    hsz = params.hidden_size
    if prev_h.shape != (hsz,) or prev_c.shape != (hsz,):
        raise ValueError(f"lstm state dims {prev_h.shape}/{prev_c.shape} != ({hsz},)")
    xh = np.concatenate([x, prev_h])
    pre = affine(params.W, xh, params.b)
    i = sigmoid(pre[:hsz])
    f = sigmoid(pre[hsz:2 * hsz])
    o = sigmoid(pre[2 * hsz:3 * hsz])
    g = np.tanh(pre[3 * hsz:])
    c = f * prev_c + i * g
    h = o * np.tanh(c)
    return h, c


def gaussian_perturb(v: Array, sigma: float, mode: str, rng: RngStream) -> Array:
    """Perturb a vector with Gaussian noise.

    additive: v + g, multiplicative: v + v*g, with g drawn from N(0, sigma^2 I).
    sigma = 0 returns an unchanged copy.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if mode not in ("additive", "multiplicative"):
        raise ValueError(f"unknown noise mode {mode!r}")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0.0:
        return v.copy()
    g = rng.normal(size=v.shape) * sigma
    if mode == "additive":
        return v + g
    return v + v * g


def dropout_mask(p: float, size: int, rng: RngStream) -> Array:
    """Inverted-dropout mask: entries 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must satisfy 0 <= p < 1")
    if p == 0.0:
        return np.ones(size)
    keep = rng.random(size) >= p
    return keep / (1.0 - p)


# ---------------------------------------------------------------------------
# trace recorder
# ---------------------------------------------------------------------------

NODE_KINDS = (
    "leaf",
    "affine",
    "add",
    "sub",
    "elemwise_mul",
    "scalar_mul",
    "pointwise_nonlin",
    "softmax",
    "concat",
    "select",
)


@dataclass
class TraceNode:
    idx: int
    kind: str
    inputs: tuple[int, ...]
    value: Array
    weight: Array | None = None   # affine only
    bias: Array | None = None     # affine only
    fn: str | None = None         # pointwise_nonlin only
    scalar: float | None = None   # scalar_mul only
    indices: Array | None = None  # select only
    tag: tuple | None = None      # leaf provenance, e.g. ("src_embed", t)


class TracedGraph:
    """Recorded forward computation over vector-valued nodes.

    Nodes are appended in execution order, so the node list is a topological
    order by construction and the graph is acyclic (inputs always refer to
    already-existing nodes). ``replay`` re-executes every non-leaf node from
    its recorded inputs and checks bit-for-bit agreement with the recorded
    output.
    """

    def __init__(self):
        self.nodes: list[TraceNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, idx: int) -> Array:
        if not 0 <= idx < len(self.nodes):
            raise ValueError(f"node {idx} does not exist")
        return self.nodes[idx].value

    def _append(self, node: TraceNode) -> int:
        self.nodes.append(node)
        return node.idx

    def _new(self, kind: str, inputs: tuple[int, ...], value: Array, **extra) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} does not exist")
        node = TraceNode(idx=len(self.nodes), kind=kind, inputs=inputs,
                         value=np.asarray(value, dtype=np.float64), **extra)
        return self._append(node)

    def leaf(self, value: Array, tag: tuple | None = None) -> int:
        return self._new("leaf", (), value, tag=tag)

    def affine(self, W: Array, x: int, b: Array | None = None) -> int:
        value = affine(W, self.value(x), b)
        return self._new("affine", (x,), value, weight=W, bias=b)

    def add(self, *xs: int) -> int:
        if len(xs) < 2:
            raise ValueError("add needs at least two inputs")
        value = _sum_values([self.value(x) for x in xs])
        return self._new("add", tuple(xs), value)

    def sub(self, a: int, b: int) -> int:
        return self._new("sub", (a, b), self.value(a) - self.value(b))

    def mul(self, a: int, b: int) -> int:
        return self._new("elemwise_mul", (a, b), self.value(a) * self.value(b))

    def scalar_mul(self, scalar: float, x: int) -> int:
        return self._new("scalar_mul", (x,), float(scalar) * self.value(x), scalar=float(scalar))

    def pointwise(self, fn: str, x: int) -> int:
        return self._new("pointwise_nonlin", (x,), pointwise(fn, self.value(x)), fn=fn)

    def softmax(self, x: int) -> int:
        return self._new("softmax", (x,), softmax(self.value(x)))

    def concat(self, *xs: int) -> int:
        value = np.concatenate([self.value(x) for x in xs])
        return self._new("concat", tuple(xs), value)

    def select(self, x: int, indices) -> int:
        indices = np.asarray(indices, dtype=np.int64)
        return self._new("select", (x,), self.value(x)[indices], indices=indices)

    def lstm_step(self, params: LstmParams, h: int, c: int, x: int) -> tuple[int, int]:
        """Record one LSTM step as four separate gate affines plus gate arithmetic."""
        xh = self.concat(x, h)
        gates = []
        for gate, fn in enumerate(("sigmoid", "sigmoid", "sigmoid", "tanh")):
            Wg, bg = params.gate_rows(gate)
            gates.append(self.pointwise(fn, self.affine(Wg, xh, bg)))
        i, f, o, g = gates
        c_new = self.add(self.mul(f, c), self.mul(i, g))
        h_new = self.mul(o, self.pointwise("tanh", c_new))
        return h_new, c_new

    def recompute(self, node: TraceNode) -> Array:
        """Recompute a non-leaf node's value from its inputs' recorded values."""
        vals = [self.nodes[i].value for i in node.inputs]
        if node.kind == "affine":
            return affine(node.weight, vals[0], node.bias)
        if node.kind == "add":
            return _sum_values(vals)
        if node.kind == "sub":
            return vals[0] - vals[1]
        if node.kind == "elemwise_mul":
            return vals[0] * vals[1]
        if node.kind == "scalar_mul":
            return node.scalar * vals[0]
        if node.kind == "pointwise_nonlin":
            return pointwise(node.fn, vals[0])
        if node.kind == "softmax":
            return softmax(vals[0])
        if node.kind == "concat":
            return np.concatenate(vals)
        if node.kind == "select":
            return vals[0][node.indices]
        raise ValueError(f"cannot recompute node kind {node.kind!r}")

    def replay(self) -> None:
        """Re-execute all non-leaf nodes; raise if any value fails to reproduce."""
        for node in self.nodes:
            for i in node.inputs:
                if i >= node.idx:
                    raise AssertionError(f"node {node.idx} depends on later node {i}")
            if node.kind == "leaf":
                continue
            redone = self.recompute(node)
            if not np.array_equal(redone, node.value):
                raise AssertionError(f"replay mismatch at node {node.idx} ({node.kind})")

    def leaves(self) -> list[TraceNode]:
        return [n for n in self.nodes if n.kind == "leaf"]

    def consumers(self) -> list[list[int]]:
        """For each node, the ids of nodes that consume it."""
        out: list[list[int]] = [[] for _ in self.nodes]
        for node in self.nodes:
            for i in node.inputs:
                out[i].append(node.idx)
        return out


def _sum_values(vals: list[Array]) -> Array:
    total = vals[0].copy()
    for v in vals[1:]:
        total += v
    return total
