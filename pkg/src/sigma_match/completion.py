"""Semantic completion: missing-category detection, hallucination nodes and
the cluster-gated memory bank."""

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .autograd import Tensor, as_tensor
from .errors import PreconditionError, ShapeError
from .graph_core import Domain, NodeSet

SEED_INIT_STD = 0.02
KNN_K = 5
CLUSTER_MIN_POINTS = 5  # clustering runs only when strictly more points than this
EDGE_FLOOR = 1e-12  # affinities below this count as missing edges
HALLUCINATION_MIN = 4
HALLUCINATION_MAX = 32


@dataclass
class MemoryBank:
    """Per-category seed vectors for one domain; row ``c - 1`` holds class ``c``."""

    seeds: np.ndarray
    initialized: np.ndarray

    @classmethod
    def create(cls, num_classes, dim, rng):
        return cls(
            rng.normal(0.0, SEED_INIT_STD, size=(num_classes, dim)),
            np.zeros(num_classes, dtype=bool),
        )

    @property
    def num_classes(self):
        return self.seeds.shape[0]

    def seed(self, category):
        if not 1 <= category <= self.num_classes:
            raise PreconditionError(f"no memory seed for category {category}")
        return self.seeds[category - 1]

    def copy(self):
        return MemoryBank(self.seeds.copy(), self.initialized.copy())


@dataclass(frozen=True)
class CategoryInventory:
    present_source: frozenset
    present_target: frozenset
    missing_source: frozenset
    missing_target: frozenset


@dataclass
class HallucinationBatch:
    category: int
    count: int
    mean: np.ndarray
    std: np.ndarray
    nodes: NodeSet


def missing_category_sets(source_labels, target_labels, num_classes=None):
    """Foreground categories present in one domain's batch but not the other's."""
    src = {int(c) for c in np.asarray(source_labels).ravel() if c != 0}
    tgt = {int(c) for c in np.asarray(target_labels).ravel() if c != 0}
    if num_classes is not None and any(c > num_classes for c in src | tgt):
        raise PreconditionError(f"labels must lie in 0..{num_classes}")
    return CategoryInventory(
        frozenset(src), frozenset(tgt), frozenset(tgt - src), frozenset(src - tgt)
    )


def hallucination_count(counterpart_labels):
    """Median per-class foreground count of the counterpart batch, clipped to
    [4, 32]."""
    labels = np.asarray(counterpart_labels)
    labels = labels[labels > 0]
    if labels.size == 0:
        return HALLUCINATION_MIN
    _, counts = np.unique(labels, return_counts=True)
    return int(np.clip(int(np.median(counts)), HALLUCINATION_MIN, HALLUCINATION_MAX))


def class_std(counterpart, category):
    """Per-dimension population standard deviation of the counterpart nodes in
    ``category``; zero when only one such node exists."""
    idx = np.flatnonzero(counterpart.labels == category)
    if idx.size == 0:
        raise PreconditionError(f"counterpart set has no node of category {category}")
    if idx.size == 1:
        return Tensor(np.zeros(counterpart.dim))
    v = counterpart.embeddings[idx]
    centered = v - v.mean(axis=0, keepdims=True)
    return (centered * centered).mean(axis=0).sqrt()


def hallucinate_from_noise(category, seed, std, noise, params, domain, prefix="halluc"):
    """Project ``seed + std * noise`` through the hallucination map."""
    x = as_tensor(seed) + as_tensor(std) * as_tensor(noise)
    v = params.linear(x, prefix)
    n = noise.shape[0]
    return NodeSet(
        v,
        np.full(n, category, dtype=np.int64),
        domain,
        hallucinated=np.ones(n, dtype=bool),
        pseudo=np.zeros(n, dtype=bool),
    )


def hallucinate_nodes(category, bank, counterpart_nodes, count, params, rng, prefix="halluc"):
    """Sample ``count`` nodes of a missing category from N(seed, diag(std^2))
    and project them linearly."""
    std = class_std(counterpart_nodes, category)
    seed = bank.seed(category)
    noise = rng.standard_normal((count, seed.shape[0]))
    other = Domain.TARGET if counterpart_nodes.domain is Domain.SOURCE else Domain.SOURCE
    nodes = hallucinate_from_noise(category, seed, std, noise, params, other, prefix)
    return HallucinationBatch(category, count, seed.copy(), std.data.copy(), nodes)


# ---------------------------------------------------------------------------
# spectral clustering
# ---------------------------------------------------------------------------


def knn_affinity(points, k=KNN_K):
    """Symmetric KNN affinity ``exp(-d^2 / s)`` with ``s`` the median squared
    KNN distance. Returns ``None`` when every point coincides."""
    x = np.asarray(points, dtype=np.float64)
    m = x.shape[0]
    k = min(k, m - 1)
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    order = np.argsort(sq + np.diag(np.full(m, np.inf)), axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(m), k)
    cols = order.ravel()
    knn_sq = sq[rows, cols]
    scale = float(np.median(knn_sq))
    if scale <= 0.0:
        positive = knn_sq[knn_sq > 0]
        if positive.size == 0:
            return None
        scale = float(positive.mean())
    adj = np.zeros((m, m), dtype=bool)
    adj[rows, cols] = True
    adj |= adj.T
    return np.where(adj, np.exp(-sq / scale), 0.0)


def spectral_partition(points):
    """Split points into two clusters with the Fiedler vector of the
    normalized Laplacian of a KNN(5) affinity graph.

    The cluster that contains point 0 is returned first. A disconnected graph
    (edges below ``EDGE_FLOOR`` do not count) splits its largest component
    from the rest; coincident points come back
    as one cluster and an empty one.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("points must be an M x D matrix")
    m = x.shape[0]
    if m <= CLUSTER_MIN_POINTS:
        raise PreconditionError(f"spectral partition needs more than {CLUSTER_MIN_POINTS} points")
    w = knn_affinity(x)
    if w is None:
        return np.arange(m), np.zeros(0, dtype=np.int64)
    # Edges that underflow to ~0 leave a degenerate null space whose second
    # eigenvector no longer separates anything, so they are treated as absent.
    w = np.where(w >= EDGE_FLOOR, w, 0.0)
    n_comp, comp = connected_components(w > 0, directed=False)
    if n_comp > 1:
        sizes = np.bincount(comp)
        side = comp == int(np.argmax(sizes))
    else:
        deg = w.sum(axis=1)
        dinv = 1.0 / np.sqrt(deg)
        lap = np.eye(m) - dinv[:, None] * w * dinv[None, :]
        _, vecs = np.linalg.eigh(lap)
        side = dinv * vecs[:, 1] >= 0.0
    if not side[0]:
        side = ~side
    return np.flatnonzero(side), np.flatnonzero(~side)


def cosine_momentum(b, seed):
    """Cosine similarity of ``b`` and ``seed`` clamped to [0, 1]."""
    nb, ns = np.linalg.norm(b), np.linalg.norm(seed)
    if nb == 0.0 or ns == 0.0:
        return 0.0
    return float(np.clip(np.dot(b, seed) / (nb * ns), 0.0, 1.0))


def momentum_update(seed, b):
    sim = cosine_momentum(b, seed)
    return sim * seed + (1.0 - sim) * b


def update_memory_bank(bank, category, class_nodes):
    """Gradient-free seed update from the enhanced nodes of one category.

    With more than five points (seed included) the seed's spectral cluster
    supplies the batch summary ``b`` (seed excluded); otherwise ``b`` is the
    mean of all nodes. Returns a new bank; the input is not modified.
    """
    if isinstance(class_nodes, NodeSet):
        if np.any(class_nodes.hallucinated):
            raise PreconditionError("hallucination nodes must not update the memory bank")
        if np.any(class_nodes.labels != category):
            raise PreconditionError(f"memory update for category {category} got other labels")
        values = class_nodes.values
    else:
        values = np.asarray(class_nodes, dtype=np.float64)
    if len(values) == 0:
        return bank
    seed = bank.seed(category)
    if len(values) + 1 > CLUSTER_MIN_POINTS:
        seed_side, _ = spectral_partition(np.vstack([seed[None, :], values]))
        members = seed_side[seed_side != 0] - 1
        if members.size == 0:
            return bank
        b = values[members].mean(axis=0)
    else:
        b = values.mean(axis=0)
    out = bank.copy()
    out.seeds[category - 1] = momentum_update(seed, b)
    out.initialized[category - 1] = True
    return out
