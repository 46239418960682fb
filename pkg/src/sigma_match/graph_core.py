"""Node sets, adjacency construction, graph convolution and parameter maps."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autograd import Tensor, as_tensor, concat
from .errors import NumericError, PreconditionError, ShapeError

LN_EPS = 1e-5


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class NodeSet:
    """A batch of node embeddings with per-node bookkeeping.

    ``labels`` use 0 for background and 1..C for foreground categories.
    ``true_labels`` is optional ground truth for evaluation; it defaults to
    ``labels``.
    """

    embeddings: Tensor
    labels: np.ndarray
    domain: Domain
    hallucinated: np.ndarray = None
    pseudo: np.ndarray = None
    true_labels: np.ndarray = None

    def __post_init__(self):
        self.embeddings = as_tensor(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be N x D, got shape {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.domain = Domain(self.domain)
        if self.hallucinated is None:
            self.hallucinated = np.zeros(n, dtype=bool)
        if self.pseudo is None:
            self.pseudo = np.zeros(n, dtype=bool)
        if self.true_labels is None:
            self.true_labels = self.labels.copy()
        self.hallucinated = np.asarray(self.hallucinated, dtype=bool).reshape(-1)
        self.pseudo = np.asarray(self.pseudo, dtype=bool).reshape(-1)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64).reshape(-1)
        for name in ("labels", "hallucinated", "pseudo", "true_labels"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(self.labels < 0):
            raise PreconditionError("labels must be non-negative")
        if np.any(self.hallucinated & (self.labels == 0)):
            raise PreconditionError("background nodes cannot be hallucinated")
        bad = ~np.isfinite(self.embeddings.data).all(axis=1)
        if bad.any():
            raise NumericError(f"non-finite embedding at node {int(np.flatnonzero(bad)[0])}")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @property
    def values(self):
        return self.embeddings.data

    def with_embeddings(self, embeddings):
        return NodeSet(
            embeddings, self.labels, self.domain, self.hallucinated, self.pseudo, self.true_labels
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return NodeSet(
            self.embeddings[idx],
            self.labels[idx],
            self.domain,
            self.hallucinated[idx],
            self.pseudo[idx],
            self.true_labels[idx],
        )

    def existing(self):
        """Nodes that were sampled from data rather than hallucinated."""
        return self.subset(np.flatnonzero(~self.hallucinated))

    def extend(self, other):
        return NodeSet(
            concat([self.embeddings, other.embeddings]),
            np.concatenate([self.labels, other.labels]),
            self.domain,
            np.concatenate([self.hallucinated, other.hallucinated]),
            np.concatenate([self.pseudo, other.pseudo]),
            np.concatenate([self.true_labels, other.true_labels]),
        )


@dataclass
class AdjacencyMatrix:
    entries: Tensor
    drop_rate: float = 0.0
    mask: np.ndarray = field(default=None, repr=False)

    @property
    def values(self):
        return self.entries.data


class Params:
    """Named learnable tensors (weights, biases, layer-norm gain/shift)."""

    def __init__(self, arrays=None):
        self.tensors = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name, array):
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def arrays(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self):
        return Params(self.arrays())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {
            k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.tensors.items()
        }

    # -- initializers ------------------------------------------------------

    def init_linear(self, prefix, d_in, d_out, rng, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(d_in, d_out)))
        if bias:
            self.add(f"{prefix}.bias", rng.uniform(-bound, bound, size=d_out))

    def init_layer_norm(self, prefix, dim):
        self.add(f"{prefix}.gain", np.ones(dim))
        self.add(f"{prefix}.shift", np.zeros(dim))

    # -- application -------------------------------------------------------

    def linear(self, x, prefix):
        w = self.tensors[f"{prefix}.weight"]
        x = as_tensor(x)
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
        out = x @ w
        b = self.tensors.get(f"{prefix}.bias")
        return out if b is None else out + b

    def layer_norm(self, x, prefix):
        return layer_normalize(x, self.tensors[f"{prefix}.gain"], self.tensors[f"{prefix}.shift"])


def layer_normalize(x, gain=None, shift=None, eps=LN_EPS):
    """Normalize along the last axis with population variance, then apply
    ``gain`` and ``shift``."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer normalization needs at least 2 features, got {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / (var + eps).sqrt()
    if gain is not None:
        y = y * gain
    if shift is not None:
        y = y + shift
    return y


def edge_drop_mask(n, drop_rate, rng):
    """Keep-mask for edge drop: one uniform draw per entry, row-major, an
    entry is kept when its draw is ``>= drop_rate``."""
    return rng.random((n, n)) >= drop_rate


def build_adjacency(nodes, w_e, drop_rate=0.0, rng=None, training=True, mask=None):
    """Row-softmax of projected inner products, then edge drop.

    Dropped entries are zeroed without renormalizing. Edge drop only runs in
    training mode; pass ``mask`` to reuse a previously drawn keep-mask.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise PreconditionError(f"drop_rate must be in [0, 1), got {drop_rate}")
    v = nodes.embeddings if isinstance(nodes, NodeSet) else as_tensor(nodes)
    w_e = as_tensor(w_e)
    if v.shape[0] < 1:
        raise PreconditionError("adjacency needs at least one node")
    if v.shape[1] != w_e.shape[0]:
        raise ShapeError(f"node dim {v.shape[1]} does not match W_e rows {w_e.shape[0]}")
    proj = v @ w_e
    a = (proj @ proj.T).softmax(axis=1)
    if not training:
        return AdjacencyMatrix(a, drop_rate, None)
    if mask is None:
        if rng is None:
            raise PreconditionError("training-mode edge drop needs an rng or a mask")
        mask = edge_drop_mask(v.shape[0], drop_rate, rng)
    return AdjacencyMatrix(a * mask.astype(np.float64), drop_rate, mask)


def gcn_forward(nodes, adj, w_gcn, gain=None, shift=None):
    """Single-layer graph convolution with residual and layer norm:
    ``LN(A V W + V)`` row by row."""
    v = nodes.embeddings
    a = adj.entries if isinstance(adj, AdjacencyMatrix) else as_tensor(adj)
    n = v.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"adjacency shape {a.shape} does not match {n} nodes")
    bad = ~np.isfinite(v.data).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite embedding at node {int(np.flatnonzero(bad)[0])}")
    out = layer_normalize(a @ v @ as_tensor(w_gcn) + v, gain, shift)
    return nodes.with_embeddings(out)
