"""Bipartite graph matching: cross-graph attention, semantic node affinity,
Sinkhorn normalization and the structure-aware matching loss."""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .autograd import Tensor, as_tensor, concat, pairwise_mlp, sinkhorn
from .errors import NumericError, PreconditionError, ShapeError
from .graph_core import AdjacencyMatrix, NodeSet, layer_normalize

SINKHORN_ITERATIONS = 20
IN_EPS = 1e-5
QC_MODES = ("squared", "literal")

BRUTE_FORCE_MAX = 9


@dataclass
class AffinityMatrix:
    raw: Tensor
    normalized: Tensor = None
    stage: str = "raw"


@dataclass
class MatchTargets:
    y: np.ndarray


@dataclass
class MatchingLossBreakdown:
    te: Tensor
    fs: Tensor
    qc: Tensor
    total: Tensor
    te_excluded: int = 0
    fs_undefined: bool = False

    def floats(self):
        return {
            "te": self.te.item(),
            "fs": self.fs.item(),
            "qc": self.qc.item(),
            "total": self.total.item(),
        }


def cross_graph_interaction(src, tgt, params, prefix="cgi"):
    """Shared-parameter cross attention in both directions with residual and
    layer norm."""
    if len(src) == 0 or len(tgt) == 0:
        raise PreconditionError("cross-graph interaction needs non-empty node sets on both sides")
    if src.dim != tgt.dim:
        raise ShapeError(f"node dims differ: {src.dim} vs {tgt.dim}")

    def attend(q_nodes, kv_nodes):
        q = params.linear(q_nodes.embeddings, f"{prefix}.wq")
        k = params.linear(kv_nodes.embeddings, f"{prefix}.wk")
        v = params.linear(kv_nodes.embeddings, f"{prefix}.wv")
        att = (q @ k.T).softmax(axis=1)
        msg = params.linear(att @ v, f"{prefix}.wp")
        return params.layer_norm(msg + q_nodes.embeddings, f"{prefix}.ln")

    return src.with_embeddings(attend(src, tgt)), tgt.with_embeddings(attend(tgt, src))


def node_affinity(src, tgt, params, fp="aff.fp", mlp="aff.mlp"):
    """``raw[i, j] = f_mlp(f_p(src_i) ++ f_p(tgt_j))`` with ``f_mlp`` = Fc-ReLU-Fc.

    The first Fc acts on a concatenation, so it splits into a source half and
    a target half that are combined pairwise inside the kernel.
    """
    ps = params.linear(src.embeddings, fp)
    pt = params.linear(tgt.embeddings, fp)
    w1 = params[f"{mlp}.fc1.weight"]
    w2 = params[f"{mlp}.fc2.weight"]
    dp = ps.shape[1]
    if w1.shape[0] != 2 * dp:
        raise ShapeError(f"f_mlp input dim {w1.shape[0]} != 2 x f_p output dim {dp}")
    if w2.shape[1] != 1:
        raise ShapeError(f"f_mlp must have a single output channel, got {w2.shape[1]}")
    a = ps @ w1[:dp] + params[f"{mlp}.fc1.bias"]
    b = pt @ w1[dp:]
    raw = pairwise_mlp(a, b, w2[:, 0], params[f"{mlp}.fc2.bias"])
    return AffinityMatrix(raw, None, "raw")


def instance_normalize(raw, eps=IN_EPS):
    """Zero mean, unit variance over all entries of the matrix."""
    x = as_tensor(raw)
    if x.data.size < 2:
        raise PreconditionError("instance normalization needs at least two entries")
    xc = x - x.mean()
    return xc / ((xc * xc).mean() + eps).sqrt()


def sinkhorn_normalize(m, iterations=SINKHORN_ITERATIONS):
    """Alternate column and row normalization of ``exp(m)``, ending on rows.

    Runs in the log domain, which equals max-subtracted exponentiation
    followed by plain normalization. Square inputs approach doubly
    stochastic; rectangular ones come out row-stochastic with column sums
    near ``Ns / Nt``.
    """
    x = as_tensor(m)
    if not np.isfinite(x.data).all():
        raise NumericError("sinkhorn input must be finite")
    return sinkhorn(x, iterations)


def compute_affinity(src, tgt, params, iterations=SINKHORN_ITERATIONS):
    aff = node_affinity(src, tgt, params)
    aff.normalized = sinkhorn_normalize(instance_normalize(aff.raw), iterations)
    aff.stage = "sinkhorn"
    return aff


def stochastic_residual(m):
    """Largest deviation of row sums from 1 and column sums from ``Ns / Nt``."""
    m = m.data if isinstance(m, Tensor) else np.asarray(m)
    ns, nt = m.shape
    return float(
        max(np.abs(m.sum(axis=1) - 1.0).max(), np.abs(m.sum(axis=0) - ns / nt).max())
    )


def build_match_targets(src_labels, tgt_labels, background_positive=True):
    s = np.asarray(src_labels).reshape(-1, 1)
    t = np.asarray(tgt_labels).reshape(1, -1)
    y = (s == t).astype(np.float64)
    if not background_positive:
        y[(s == 0) & (t == 0)] = 0.0
    return MatchTargets(y)


def matching_loss(aff, y, adj_s, adj_t, qc_mode="squared"):
    """True-positive enhancement + false-positive suppression + quadratic
    structural constraint on a normalized affinity.

    Source rows without any same-category target are left out of the TE
    average and counted in ``te_excluded``.
    """
    if qc_mode not in QC_MODES:
        raise ValueError(f"qc_mode={qc_mode!r}; accepted: {', '.join(QC_MODES)}")
    m = aff.normalized if isinstance(aff, AffinityMatrix) else as_tensor(aff)
    y = y.y if isinstance(y, MatchTargets) else np.asarray(y, dtype=np.float64)
    a_s = adj_s.entries if isinstance(adj_s, AdjacencyMatrix) else as_tensor(adj_s)
    a_t = adj_t.entries if isinstance(adj_t, AdjacencyMatrix) else as_tensor(adj_t)
    ns, nt = m.shape
    if y.shape != (ns, nt) or a_s.shape != (ns, ns) or a_t.shape != (nt, nt):
        raise ShapeError(
            f"inconsistent shapes: affinity {m.shape}, targets {y.shape}, "
            f"A_s {a_s.shape}, A_t {a_t.shape}"
        )
    rows = np.flatnonzero(y.sum(axis=1) > 0)
    excluded = ns - len(rows)
    if len(rows):
        best = (m * y)[rows].max(axis=1)
        te = ((best - 1.0) ** 2).mean()
    else:
        te = Tensor(0.0)
    neg = 1.0 - y
    n_neg = neg.sum()
    if n_neg > 0:
        off = m * neg
        fs = (off * off).sum() / n_neg
    else:
        fs = Tensor(0.0)
    resid = a_s @ m - m @ a_t
    if qc_mode == "squared":
        qc = (resid * resid).sum() / (ns * nt)
    else:
        qc = resid.sum() / (ns * nt)
    return MatchingLossBreakdown(te, fs, qc, te + fs + qc, excluded, n_neg == 0)


def multiple_matching_loss(aff_raw, y, kind="bce"):
    """Element-wise BCE or MSE between ``sigmoid(raw)`` and the targets."""
    z = aff_raw.raw if isinstance(aff_raw, AffinityMatrix) else as_tensor(aff_raw)
    y = y.y if isinstance(y, MatchTargets) else np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"affinity {z.shape} vs targets {y.shape}")
    if kind == "bce":
        return (z.softplus() - z * y).mean()
    if kind == "mse":
        d = z.sigmoid() - y
        return (d * d).mean()
    raise ValueError(f"kind={kind!r}; accepted: bce, mse")


def node_classification_loss(nodes, params, prefix="cls"):
    """Mean cross-entropy of the Fc-ReLU-Fc node classifier over all nodes."""
    sets = [nodes] if isinstance(nodes, NodeSet) else list(nodes)
    emb = concat([s.embeddings for s in sets]) if len(sets) > 1 else sets[0].embeddings
    labels = np.concatenate([s.labels for s in sets])
    logits = params.linear(params.linear(emb, f"{prefix}.fc1").relu(), f"{prefix}.fc2")
    if labels.max(initial=0) >= logits.shape[1]:
        raise ShapeError(f"classifier has {logits.shape[1]} outputs but a label is {labels.max()}")
    logp = logits.log_softmax(axis=1)
    return -(logp[np.arange(len(labels)), labels]).mean()


@lru_cache(maxsize=None)
def _all_perms(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def brute_force_assignment(cost):
    """Exact minimum-cost assignment by scanning every permutation."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    perms = _all_perms(n)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    best = int(np.argmin(totals))
    return perms[best].copy(), float(totals[best])


def hungarian(cost):
    """Minimum-cost perfect assignment by shortest augmenting paths."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"assignment needs a square cost matrix, got {cost.shape}")
    perm = _kernels.hungarian(cost)
    return perm, float(cost[np.arange(len(perm)), perm].sum())


def hungarian_oracle(cost):
    """Exact assignment: permutation scan up to 9 x 9, augmenting paths above."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"assignment needs a square cost matrix, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    if cost.shape[0] <= BRUTE_FORCE_MAX:
        return brute_force_assignment(cost)
    return hungarian(cost)
