"""Training engine: one step runs the full semantic-complete matching pipeline.

Step order: sample nodes -> V2G projection -> node alignment loss on the
sampled nodes -> hallucination of missing categories -> adjacency + GCN ->
memory-bank update -> cross-graph interaction -> node classification loss ->
affinity + Sinkhorn -> matching loss -> backprop -> SGD.

All randomness of a step is drawn up front into :class:`StepInputs`, so the
differentiable part (:func:`forward`) is a deterministic function of the
parameters. The finite-difference check relies on that.
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, grad_reverse, no_grad, record_branches, same_branches
from .completion import (
    MemoryBank,
    class_std,
    hallucinate_from_noise,
    hallucination_count,
    missing_category_sets,
    update_memory_bank,
)
from .config import RunConfig, format_config, parse_config
from .errors import NonFiniteLossError, NumericError, PreconditionError
from .graph_core import Domain, NodeSet, Params, build_adjacency, edge_drop_mask, gcn_forward
from .matching import (
    build_match_targets,
    compute_affinity,
    cross_graph_interaction,
    matching_loss,
    multiple_matching_loss,
    node_classification_loss,
    stochastic_residual,
)
from .synthetic import (
    SampledPixels,
    generate_scenario,
    sample_source_nodes,
    sample_target_nodes,
    to_nodeset,
)
from .tensorio import read_container, write_container

DISC_BLOCKS = 3
NA_REDUCTIONS = ("sum", "mean")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg, rng):
    """All learnable maps, PyTorch-style uniform(+-1/sqrt(fan_in)) init."""
    m, s = cfg.model, cfg.scenario
    d = m.embed_dim
    p = Params()
    p.init_linear("v2g.fc1", s.feature_dim, m.v2g_hidden, rng)
    p.init_layer_norm("v2g.ln", m.v2g_hidden)
    p.init_linear("v2g.fc2", m.v2g_hidden, d, rng)
    p.init_linear("halluc", d, d, rng)
    p.init_linear("edge.we", d, m.edge_dim, rng, bias=False)
    p.init_linear("gcn.w", d, d, rng, bias=False)
    p.init_layer_norm("gcn.ln", d)
    for name in ("wq", "wk", "wv", "wp"):
        p.init_linear(f"cgi.{name}", d, d, rng, bias=False)
    p.init_layer_norm("cgi.ln", d)
    p.init_linear("aff.fp", d, m.affinity_dim, rng)
    p.init_linear("aff.mlp.fc1", 2 * m.affinity_dim, m.mlp_hidden, rng)
    p.init_linear("aff.mlp.fc2", m.mlp_hidden, 1, rng)
    p.init_linear("cls.fc1", d, m.cls_hidden, rng)
    p.init_linear("cls.fc2", m.cls_hidden, s.num_classes + 1, rng)
    width = d
    for i in range(1, DISC_BLOCKS + 1):
        p.init_linear(f"disc.b{i}", width, m.disc_hidden, rng)
        p.init_layer_norm(f"disc.ln{i}", m.disc_hidden)
        width = m.disc_hidden
    p.init_linear("disc.head", width, 1, rng)
    return p


def param_group(name):
    return name.split(".", 1)[0]


def discriminator_logits(embeddings, params):
    h = embeddings
    for i in range(1, DISC_BLOCKS + 1):
        h = params.layer_norm(params.linear(h, f"disc.b{i}"), f"disc.ln{i}").relu()
    return params.linear(h, "disc.head").reshape(-1)


def node_alignment_loss(src_nodes, tgt_nodes, params, coeff=1.0, reduction="sum"):
    """Summed BCE of the node discriminator behind a gradient-reversal layer.

    Source nodes carry domain label 1, target nodes 0. Hallucinated nodes are
    dropped. ``reduction="mean"`` divides by the node count instead. Returns
    ``(loss, flags)``; ``flags['one_sided']`` is set when one side
    contributed no nodes.
    """
    if reduction not in NA_REDUCTIONS:
        raise ValueError(f"reduction={reduction!r}; accepted: {', '.join(NA_REDUCTIONS)}")
    terms = []
    sides = 0
    count = 0
    for nodes, label in ((src_nodes, 1.0), (tgt_nodes, 0.0)):
        if nodes is None:
            continue
        nodes = nodes.existing()
        if len(nodes) == 0:
            continue
        sides += 1
        count += len(nodes)
        z = discriminator_logits(grad_reverse(nodes.embeddings, coeff), params)
        terms.append((-z).softplus().sum() if label == 1.0 else z.softplus().sum())
    if not terms:
        return Tensor(0.0), {"one_sided": True}
    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    if reduction == "mean":
        loss = loss * (1.0 / count)
    return loss, {"one_sided": sides < 2}


def composite_loss(l_node, l_mat, l_na, lambda1=0.1, lambda2=0.1):
    return lambda1 * l_node + lambda2 * l_mat + l_na


# ---------------------------------------------------------------------------
# step inputs and forward pass
# ---------------------------------------------------------------------------


@dataclass
class StepInputs:
    source: SampledPixels
    target: SampledPixels  # None when the placeholder path is taken
    halluc_source: list  # (category, noise) pairs
    halluc_target: list
    mask_source: np.ndarray
    mask_target: np.ndarray
    bank_source: MemoryBank
    bank_target: MemoryBank

    @property
    def placeholder(self):
        return self.target is None

    def target_labels(self):
        if self.placeholder:
            return self.source.labels[: placeholder_count(len(self.source))]
        return self.target.labels


def placeholder_count(n_source):
    return max(1, n_source // 2)


def sample_batch(batch, cfg, rng):
    c = cfg.scenario.num_classes
    d_in = cfg.scenario.feature_dim
    src = [sample_source_nodes(f, boxes, cfg.max_nodes, c, rng) for f, boxes in batch.source]
    tgt = [
        sample_target_nodes(f, s, cfg.max_nodes, c, cfg.tau_fg, cfg.tau_bg, rng)
        for f, s in zip(batch.target, batch.scores)
    ]
    return SampledPixels.concat(src, d_in), SampledPixels.concat(tgt, d_in)


def plan_step(source, target, banks, cfg, rng, training=True):
    """Draw hallucination noise and edge-drop masks for already-sampled pixels."""
    if len(source) == 0:
        raise PreconditionError("source batch produced no nodes")
    if target is not None and len(target) == 0:
        target = None
    t_labels = source.labels[: placeholder_count(len(source))] if target is None else target.labels
    d = cfg.model.embed_dim
    hs, ht = [], []
    if cfg.completion:
        inv = missing_category_sets(source.labels, t_labels, cfg.scenario.num_classes)
        for cat in sorted(inv.missing_source):
            hs.append((cat, rng.standard_normal((hallucination_count(t_labels), d))))
        for cat in sorted(inv.missing_target):
            ht.append((cat, rng.standard_normal((hallucination_count(source.labels), d))))
    ns = len(source) + sum(len(z) for _, z in hs)
    nt = len(t_labels) + sum(len(z) for _, z in ht)
    mask_s = mask_t = None
    if training:
        mask_s = edge_drop_mask(ns, cfg.edge_drop, rng)
        mask_t = edge_drop_mask(nt, cfg.edge_drop, rng)
    return StepInputs(
        source, target, hs, ht, mask_s, mask_t, banks["source"].copy(), banks["target"].copy()
    )


def prepare_step(batch, banks, cfg, rng, training=True):
    source, target = sample_batch(batch, cfg, rng)
    return plan_step(source, target, banks, cfg, rng, training)


@dataclass
class Forward:
    raw_source: NodeSet
    raw_target: NodeSet
    complete_source: NodeSet
    complete_target: NodeSet
    enhanced_source: NodeSet
    enhanced_target: NodeSet
    cross_source: NodeSet
    cross_target: NodeSet
    affinity: object
    targets: object
    adj_source: object
    adj_target: object
    l_node: Tensor
    l_mat: Tensor
    l_na: Tensor
    total: Tensor
    breakdown: object = None
    na_flags: dict = field(default_factory=dict)


def _complete(nodes, plan, counterpart, bank, params, domain):
    for cat, noise in plan:
        std = class_std(counterpart, cat)
        extra = hallucinate_from_noise(cat, bank.seed(cat), std, noise, params, domain)
        nodes = nodes.extend(extra)
    return nodes


def forward(params, inputs, cfg, training=True):
    vs = to_nodeset(inputs.source, params, Domain.SOURCE)
    if inputs.placeholder:
        k = placeholder_count(len(vs))
        half = vs.subset(np.arange(k))
        vt = NodeSet(half.embeddings, half.labels, Domain.TARGET, true_labels=half.true_labels)
        l_na, na_flags = node_alignment_loss(vs, None, params, cfg.grl_coeff, cfg.na_reduction)
    else:
        vt = to_nodeset(inputs.target, params, Domain.TARGET)
        l_na, na_flags = node_alignment_loss(vs, vt, params, cfg.grl_coeff, cfg.na_reduction)

    cs = _complete(vs, inputs.halluc_source, vt, inputs.bank_source, params, Domain.SOURCE)
    ct = _complete(vt, inputs.halluc_target, vs, inputs.bank_target, params, Domain.TARGET)

    we = params["edge.we.weight"]
    adj_s = build_adjacency(cs, we, cfg.edge_drop, training=training, mask=inputs.mask_source)
    adj_t = build_adjacency(ct, we, cfg.edge_drop, training=training, mask=inputs.mask_target)
    gs = gcn_forward(cs, adj_s, params["gcn.w.weight"], params["gcn.ln.gain"], params["gcn.ln.shift"])
    gt = gcn_forward(ct, adj_t, params["gcn.w.weight"], params["gcn.ln.gain"], params["gcn.ln.shift"])

    xs, xt = cross_graph_interaction(gs, gt, params)
    l_node = node_classification_loss([xs, xt], params)

    aff = compute_affinity(xs, xt, params, cfg.sinkhorn_iterations)
    y = build_match_targets(cs.labels, ct.labels, cfg.background_positive)
    breakdown = matching_loss(aff, y, adj_s, adj_t, cfg.qc_mode)
    if cfg.matching == "single":
        l_mat = breakdown.total
    else:
        l_mat = multiple_matching_loss(aff.raw, y, cfg.matching)
    total = composite_loss(l_node, l_mat, l_na, cfg.lambda1, cfg.lambda2)
    return Forward(
        vs, vt, cs, ct, gs, gt, xs, xt, aff, y, adj_s, adj_t,
        l_node, l_mat, l_na, total, breakdown, na_flags,
    )


def updated_banks(fwd, inputs, banks):
    """Seed updates from the enhanced, non-hallucinated nodes of each category."""
    out = {}
    for key, nodes, skip in (
        ("source", fwd.enhanced_source, False),
        ("target", fwd.enhanced_target, inputs.placeholder),
    ):
        bank = banks[key]
        if not skip:
            real = nodes.existing()
            for cat in np.unique(real.labels):
                if cat == 0:
                    continue
                bank = update_memory_bank(bank, int(cat), real.subset(np.flatnonzero(real.labels == cat)))
        out[key] = bank
    return out


# ---------------------------------------------------------------------------
# state, metrics, optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: RunConfig
    params: Params
    velocity: dict
    banks: dict
    step: int
    rng: np.random.Generator
    data_rng: np.random.Generator

    @classmethod
    def create(cls, cfg):
        cfg.validate()
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, model_ss, data_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        params = init_params(cfg, init_rng)
        c, d = cfg.scenario.num_classes, cfg.model.embed_dim
        banks = {
            "source": MemoryBank.create(c, d, init_rng),
            "target": MemoryBank.create(c, d, init_rng),
        }
        velocity = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(
            cfg, params, velocity, banks, 0,
            np.random.default_rng(model_ss), np.random.default_rng(data_ss),
        )

    def next_batch(self):
        return generate_scenario(self.config.scenario, self.data_rng)


@dataclass
class MetricsRecord:
    step: int
    loss_total: float
    loss_node: float
    loss_mat: float
    loss_na: float
    te: float
    fs: float
    qc: float
    matching_accuracy: float
    te_excluded: int
    ds_residual: float
    n_source: int
    n_target: int
    n_halluc_source: int
    n_halluc_target: int
    placeholder: bool
    eval_matching_accuracy: float = None
    eval_matching_accuracy_true: float = None
    eval_centroid_gap: float = None
    eval_disc_accuracy: float = None
    eval_te_excluded: int = None
    eval_ds_residual: float = None
    wall_clock: float = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def attach_eval(self, ev):
        self.eval_matching_accuracy = ev["matching_accuracy"]
        self.eval_matching_accuracy_true = ev["matching_accuracy_true"]
        self.eval_centroid_gap = ev["centroid_gap"]
        self.eval_disc_accuracy = ev["disc_accuracy"]
        self.eval_te_excluded = ev["te_excluded"]
        self.eval_ds_residual = ev["ds_residual"]


def _row_match_accuracy(fwd, true=False):
    m = fwd.affinity.normalized.data
    best = m.argmax(axis=1)
    if true:
        src, tgt = fwd.complete_source.true_labels, fwd.complete_target.true_labels
    else:
        src, tgt = fwd.complete_source.labels, fwd.complete_target.labels
    return int((src == tgt[best]).sum()), len(src)


def sgd_update(params, velocity, grads, lr, momentum, weight_decay):
    """SGD with momentum and coupled weight decay (PyTorch semantics)."""
    for name, t in params.items():
        g = grads[name] + weight_decay * t.data
        v = momentum * velocity[name] + g
        velocity[name] = v
        t.data = t.data - lr * v


def _losses(fwd):
    bd = fwd.breakdown.floats()
    return {
        "total": fwd.total.item(),
        "node": fwd.l_node.item(),
        "mat": fwd.l_mat.item(),
        "na": fwd.l_na.item(),
        "te": bd["te"],
        "fs": bd["fs"],
        "qc": bd["qc"],
    }


def train_step(state, batch=None, inputs=None):
    """One optimization step. ``inputs`` (pre-drawn step randomness) overrides
    ``batch``. On a non-finite loss the state is left untouched and
    :class:`NonFiniteLossError` carries the loss components."""
    cfg = state.config
    rng_state = state.rng.bit_generator.state
    try:
        if inputs is None:
            inputs = prepare_step(batch, state.banks, cfg, state.rng, training=True)
        state.params.zero_grad()
        try:
            fwd = forward(state.params, inputs, cfg, training=True)
        except NumericError as exc:
            nan = float("nan")
            diag = dict.fromkeys(("total", "node", "mat", "na", "te", "fs", "qc"), nan)
            raise NonFiniteLossError(
                f"non-finite value in forward pass at step {state.step}: {exc}", diag
            ) from exc
        losses = _losses(fwd)
        if not all(np.isfinite(v) for v in losses.values()):
            raise NonFiniteLossError(f"non-finite loss at step {state.step}", losses)
        fwd.total.backward()
        grads = state.params.grads()
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise NonFiniteLossError(f"non-finite gradient in {bad[0]} at step {state.step}", losses)
    except NonFiniteLossError:
        state.rng.bit_generator.state = rng_state
        state.params.zero_grad()
        raise
    new_banks = updated_banks(fwd, inputs, state.banks)
    sgd_update(state.params, state.velocity, grads, cfg.lr, cfg.momentum, cfg.weight_decay)
    state.params.zero_grad()
    state.banks = new_banks
    correct, total = _row_match_accuracy(fwd)
    rec = MetricsRecord(
        step=state.step,
        loss_total=losses["total"],
        loss_node=losses["node"],
        loss_mat=losses["mat"],
        loss_na=losses["na"],
        te=losses["te"],
        fs=losses["fs"],
        qc=losses["qc"],
        matching_accuracy=correct / total,
        te_excluded=int(fwd.breakdown.te_excluded),
        ds_residual=stochastic_residual(fwd.affinity.normalized),
        n_source=len(fwd.complete_source),
        n_target=len(fwd.complete_target),
        n_halluc_source=int(fwd.complete_source.hallucinated.sum()),
        n_halluc_target=int(fwd.complete_target.hallucinated.sum()),
        placeholder=bool(inputs.placeholder),
    )
    state.step += 1
    return state, rec


def batch_loss(state, inputs):
    """Composite loss of the current parameters on fixed step inputs."""
    with no_grad():
        return forward(state.params, inputs, state.config, training=True).total.item()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_EVAL_DATA_KEY = 0xE1
_EVAL_MODEL_KEY = 0xE2


def make_eval_batches(cfg, n=None):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _EVAL_DATA_KEY]))
    return [generate_scenario(cfg.scenario, rng) for _ in range(n or cfg.eval_batches)]


def evaluate_metrics(state, eval_batches):
    """Held-out alignment metrics with edge drop off and no updates."""
    cfg = state.config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _EVAL_MODEL_KEY]))
    c, d = cfg.scenario.num_classes, cfg.model.embed_dim
    sums = {dom: np.zeros((c + 1, d)) for dom in ("source", "target")}
    counts = {dom: np.zeros(c + 1) for dom in ("source", "target")}
    correct = correct_true = n_rows = 0
    disc_hits = {"source": [0, 0], "target": [0, 0]}
    te_excluded = 0
    residual = 0.0
    with no_grad():
        for batch in eval_batches:
            inputs = prepare_step(batch, state.banks, cfg, rng, training=False)
            fwd = forward(state.params, inputs, cfg, training=False)
            k, n = _row_match_accuracy(fwd)
            kt, _ = _row_match_accuracy(fwd, true=True)
            correct += k
            correct_true += kt
            n_rows += n
            te_excluded += int(fwd.breakdown.te_excluded)
            residual = max(residual, stochastic_residual(fwd.affinity.normalized))
            sides = [("source", fwd.raw_source, fwd.cross_source, True)]
            if not inputs.placeholder:
                sides.append(("target", fwd.raw_target, fwd.cross_target, False))
            for dom, raw, cross, is_src in sides:
                z = discriminator_logits(raw.embeddings, state.params).data
                hit = (z > 0) if is_src else (z <= 0)
                disc_hits[dom][0] += int(hit.sum())
                disc_hits[dom][1] += len(z)
                keep = ~cross.hallucinated
                lab = cross.true_labels[keep]
                emb = cross.values[keep]
                np.add.at(sums[dom], lab, emb)
                np.add.at(counts[dom], lab, 1)
    gaps = {}
    for cat in range(1, c + 1):
        if counts["source"][cat] and counts["target"][cat]:
            mu_s = sums["source"][cat] / counts["source"][cat]
            mu_t = sums["target"][cat] / counts["target"][cat]
            gaps[cat] = float(np.linalg.norm(mu_s - mu_t))
    rates = [h / n for h, n in disc_hits.values() if n]
    return {
        "matching_accuracy": correct / n_rows if n_rows else float("nan"),
        "matching_accuracy_true": correct_true / n_rows if n_rows else float("nan"),
        "centroid_gap": float(np.mean(list(gaps.values()))) if gaps else float("nan"),
        "centroid_gaps": gaps,
        "disc_accuracy": float(np.mean(rates)) if rates else float("nan"),
        "te_excluded": te_excluded,
        "ds_residual": residual,
    }


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    group_errors: dict
    tolerance: float
    grl_sign_error: float
    grl_fd_norm: float
    bank_analytic_norm: float
    bank_fd_norm: float
    nonfinite: bool = False
    kinked_entries: int = 0  # entries with no step free of a branch change

    @property
    def failed_groups(self):
        return [g for g, e in self.group_errors.items() if not e < self.tolerance]

    @property
    def grl_sign_ok(self):
        return self.grl_fd_norm > 0 and self.grl_sign_error < self.tolerance

    @property
    def passed(self):
        return not self.nonfinite and not self.failed_groups and self.grl_sign_ok

    def to_dict(self):
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "group_errors": self.group_errors,
            "failed_groups": self.failed_groups,
            "grl_sign_ok": self.grl_sign_ok,
            "grl_sign_error": self.grl_sign_error,
            "grl_fd_norm": self.grl_fd_norm,
            "bank_analytic_norm": self.bank_analytic_norm,
            "bank_fd_norm": self.bank_fd_norm,
            "nonfinite": self.nonfinite,
            "kinked_entries": self.kinked_entries,
        }


FD_SHRINKS = 3  # a kinked entry retries with h/10, h/100, h/1000


def _rel_error(analytic, numeric, floor=1e-7):
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_difference_check(state, batch=None, h=1e-5, entries=6, inputs=None, corrupt_group=None,
                            rng=None):
    """Central differences of the composite loss against the analytic
    gradients for every parameter group.

    The expected gradient of a parameter is ``d(l1*L_node + l2*L_mat) +
    s * d(L_NA)`` with ``s = +1`` for discriminator parameters and
    ``s = -coeff`` upstream of the reversal layer. The reversal sign is also
    checked on its own: the analytic ``L_NA`` gradient of the projection
    parameters must equal the negated finite difference. Memory-bank seeds
    are perturbed as well; their analytic gradient is zero by construction.
    """
    cfg = state.config
    rng = rng if rng is not None else np.random.default_rng(0)
    if inputs is None:
        inputs = prepare_step(batch, state.banks, cfg, np.random.default_rng(rng.integers(2**32)),
                              training=True)
    params = state.params
    coeff = cfg.grl_coeff

    params.zero_grad()
    fwd = forward(params, inputs, cfg, training=True)
    fwd.total.backward()
    analytic = params.grads()
    params.zero_grad()
    fwd = forward(params, inputs, cfg, training=True)
    fwd.l_na.backward()
    analytic_na = params.grads()
    params.zero_grad()

    def evaluate():
        with no_grad(), record_branches() as log:
            f = forward(params, inputs, cfg, training=True)
        main = (cfg.lambda1 * f.l_node + cfg.lambda2 * f.l_mat).item()
        return main, f.l_na.item(), log

    kinked = 0
    base_main, base_na, base_log = evaluate()

    def central(flat, i):
        """Difference quotient of (main, L_NA) at one entry.

        The central step shrinks until both sides take the same relu/max
        branches. If none does, the one-sided quotient on the side that keeps
        the base point's branches is used, which is the derivative of the
        piece the analytic gradient was taken on.
        """
        nonlocal kinked
        orig = flat[i]
        for step in h * 10.0 ** -np.arange(FD_SHRINKS + 1):
            flat[i] = orig + step
            mp, np_, lp = evaluate()
            flat[i] = orig - step
            mm, nm, lm = evaluate()
            flat[i] = orig
            if same_branches(lp, lm):
                return (mp - mm) / (2 * step), (np_ - nm) / (2 * step)
        if same_branches(lp, base_log):
            return (mp - base_main) / step, (np_ - base_na) / step
        if same_branches(lm, base_log):
            return (base_main - mm) / step, (base_na - nm) / step
        kinked += 1
        return (mp - mm) / (2 * step), (np_ - nm) / (2 * step)

    errs = {}
    grl_a, grl_n = [], []
    nonfinite = False
    for name, t in params.items():
        group = param_group(name)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= entries else rng.choice(flat.size, entries, replace=False)
        a = analytic[name].reshape(-1)[idx].copy()
        if corrupt_group and group == corrupt_group:
            a = a + 1e-2 * max(np.abs(a).max(), 1.0)
        num = np.empty(len(idx))
        num_na = np.empty(len(idx))
        for k, i in enumerate(idx):
            d_main, d_na = central(flat, i)
            sign = 1.0 if group == "disc" else -coeff
            num[k] = d_main + sign * d_na
            num_na[k] = d_na
        if not (np.isfinite(num).all() and np.isfinite(a).all()):
            nonfinite = True
        errs.setdefault(group, []).append((a, num))
        if group == "v2g":
            grl_a.append(analytic_na[name].reshape(-1)[idx])
            grl_n.append(num_na)
    group_errors = {
        g: _rel_error(np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs]))
        for g, pairs in errs.items()
    }
    ga, gn = np.concatenate(grl_a), np.concatenate(grl_n)
    grl_err = _rel_error(ga, -coeff * gn)

    bank_fd = []
    for key in ("source", "target"):
        seeds = getattr(inputs, f"bank_{key}").seeds
        flat = seeds.reshape(-1)
        for i in rng.choice(flat.size, min(entries, flat.size), replace=False):
            d_main, d_na = central(flat, i)
            bank_fd.append(d_main + d_na)
    return GradientCheckReport(
        group_errors,
        cfg.gradcheck_tolerance,
        grl_err,
        float(np.abs(gn).max(initial=0.0)),
        0.0,
        float(np.abs(bank_fd).max(initial=0.0)),
        nonfinite,
        kinked,
    )


# At wider separation same-class nodes of a 4-wide embedding are near
# duplicates, so TE's row max ties tighter than any usable difference step.
GRADCHECK_CLASS_SEP = 4.0


def gradcheck_config(cfg):
    """A tiny instance of ``cfg`` sized for finite differences."""
    g = parse_config(format_config(cfg))
    d = cfg.gradcheck_embed_dim
    g.model = dataclasses.replace(
        g.model, embed_dim=d, v2g_hidden=d, edge_dim=d, affinity_dim=d, mlp_hidden=4 * d,
        cls_hidden=d,
    )
    g.scenario = dataclasses.replace(
        g.scenario,
        feature_dim=max(d, g.scenario.num_classes + 1),
        map_width=cfg.gradcheck_map_size,
        map_height=cfg.gradcheck_map_size,
        batch_size=1,
        boxes_per_image=1,
        box_min=2,
        box_max=min(2, cfg.gradcheck_map_size),
        class_sep=min(g.scenario.class_sep, GRADCHECK_CLASS_SEP),
    )
    g.max_nodes = cfg.gradcheck_max_nodes
    return g.validate()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(state, path):
    tensors = {f"param/{k}": t.data for k, t in state.params.items()}
    tensors.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    for key, bank in state.banks.items():
        tensors[f"bank/{key}/seeds"] = bank.seeds
        tensors[f"bank/{key}/initialized"] = bank.initialized.astype(np.float64)
    meta = {
        "format": "sigma-match-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "data_rng": state.data_rng.bit_generator.state,
        "config": format_config(state.config),
    }
    write_container(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = read_container(path)
    if meta.get("format") != "sigma-match-checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    cfg = parse_config(meta["config"])
    params = Params({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    velocity = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
    banks = {
        key: MemoryBank(tensors[f"bank/{key}/seeds"], tensors[f"bank/{key}/initialized"] > 0.5)
        for key in ("source", "target")
    }
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    data_rng = np.random.default_rng()
    data_rng.bit_generator.state = meta["data_rng"]
    return TrainState(cfg, params, velocity, banks, int(meta["step"]), rng, data_rng)


def run_training(state, steps, on_record=None, eval_batches=None):
    """Train for ``steps`` steps, evaluating every ``eval_every`` steps and at
    the end. Returns the list of records and the initial evaluation."""
    cfg = state.config
    eval_batches = eval_batches if eval_batches is not None else make_eval_batches(cfg)
    initial = evaluate_metrics(state, eval_batches)
    records = []
    for i in range(steps):
        t0 = time.perf_counter()
        state, rec = train_step(state, state.next_batch())
        last = i == steps - 1
        if last or (cfg.eval_every and state.step % cfg.eval_every == 0):
            rec.attach_eval(evaluate_metrics(state, eval_batches))
        rec_clock = time.perf_counter() - t0
        records.append(rec)
        if on_record is not None:
            on_record(rec, rec_clock)
    return records, initial
