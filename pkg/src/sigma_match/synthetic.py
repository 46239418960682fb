"""Synthetic two-domain feature maps and vision-to-graph sampling.

Source maps carry planted boxes with annotations. Target maps carry the same
classes shifted by a domain offset and are scored by a fixed linear template
head whose sigmoid scores drive pseudo-label sampling.
"""

from dataclasses import dataclass, field

import numpy as np

from .autograd import as_tensor
from .errors import ConfigError, PreconditionError, ShapeError
from .graph_core import Domain, NodeSet

TAU_FG = 0.5
TAU_BG = 0.05
MAX_NODES_PER_MAP = 100


@dataclass
class FeatureMap:
    """A ``D x W x H`` feature tensor. ``label_map`` is the planted per-pixel
    category (0 = background) when the map is synthetic."""

    values: np.ndarray
    domain: Domain
    label_map: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.domain = Domain(self.domain)
        if self.values.ndim != 3 or min(self.values.shape[1:]) < 1:
            raise ShapeError(f"feature map must be D x W x H with W, H >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class BoxAnnotation:
    """Inclusive pixel rectangle ``(x0, y0, x1, y1)`` with a category in 1..C."""

    x0: int
    y0: int
    x1: int
    y1: int
    category: int

    @property
    def area(self):
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def check(self, width, height):
        if not (0 <= self.x0 <= self.x1 < width and 0 <= self.y0 <= self.y1 < height):
            raise ShapeError(f"box {self} outside a {width} x {height} map")
        if self.category < 1:
            raise PreconditionError("box category must be a foreground class (>= 1)")


@dataclass
class ScoreMap:
    values: np.ndarray  # C x W x H, entries in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("score map entries must lie in [0, 1]")


@dataclass
class ScenarioConfig:
    num_classes: int = 4
    feature_dim: int = 32
    map_width: int = 12
    map_height: int = 12
    batch_size: int = 2
    boxes_per_image: int = 2
    box_min: int = 2
    box_max: int = 4
    class_sep: float = 12.0
    shift: float = 6.0
    cov_scale_source: float = 1.0
    cov_scale_target: float = 1.0
    background_scale: float = 1.0
    source_classes: tuple = None  # None = all of 1..C
    target_classes: tuple = None
    box_class_mode: str = "random"  # random | cover
    score_gain: float = 10.0
    score_offset: float = 0.5
    seed: int = 0

    def present(self, domain):
        classes = self.source_classes if Domain(domain) is Domain.SOURCE else self.target_classes
        if classes is None:
            return tuple(range(1, self.num_classes + 1))
        return tuple(sorted(int(c) for c in classes))

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("scenario.num_classes must be >= 2")
        if self.feature_dim < self.num_classes + 1:
            raise ConfigError("scenario.feature_dim must exceed scenario.num_classes")
        if not 1 <= self.box_min <= self.box_max:
            raise ConfigError("need 1 <= scenario.box_min <= scenario.box_max")
        if self.box_max > min(self.map_width, self.map_height):
            raise ConfigError("scenario.box_max does not fit inside the map")
        if self.batch_size < 1 or self.boxes_per_image < 1:
            raise ConfigError("scenario.batch_size and scenario.boxes_per_image must be >= 1")
        if self.box_class_mode not in ("random", "cover"):
            raise ConfigError(
                f"scenario.box_class_mode={self.box_class_mode!r}; accepted: random, cover"
            )
        for dom in Domain:
            classes = self.present(dom)
            if not classes:
                raise ConfigError(f"presence mask for {dom.value} empties every batch")
            if any(c < 1 or c > self.num_classes for c in classes):
                raise ConfigError(f"presence mask for {dom.value} names a class outside 1..C")


@dataclass
class Geometry:
    """Class means, domain shift and template head derived from the config seed."""

    class_means: np.ndarray  # (C + 1) x D, row 0 = background mean (zero)
    shift: np.ndarray  # D

    @classmethod
    def from_config(cls, cfg):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5167]))
        q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.num_classes + 1)))
        means = np.zeros((cfg.num_classes + 1, cfg.feature_dim))
        means[1:] = cfg.class_sep * q[:, : cfg.num_classes].T
        return cls(means, cfg.shift * q[:, cfg.num_classes])

    def score(self, values, cfg):
        """Fixed template head: sigmoid(gain * (x . m_c / |m_c|^2 - offset))."""
        m = self.class_means[1:]
        proj = np.einsum("cd,dwh->cwh", m / (m * m).sum(axis=1, keepdims=True), values)
        z = cfg.score_gain * (proj - cfg.score_offset)
        return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ScenarioBatch:
    source: list  # (FeatureMap, [BoxAnnotation]) per image
    target: list  # FeatureMap per image
    scores: list  # ScoreMap per target image


def _place_boxes(cfg, classes, rng):
    boxes = []
    occupied = np.zeros((cfg.map_width, cfg.map_height), dtype=bool)
    for cat in classes:
        for _ in range(100):
            w = int(rng.integers(cfg.box_min, cfg.box_max + 1))
            h = int(rng.integers(cfg.box_min, cfg.box_max + 1))
            x0 = int(rng.integers(0, cfg.map_width - w + 1))
            y0 = int(rng.integers(0, cfg.map_height - h + 1))
            if not occupied[x0 : x0 + w, y0 : y0 + h].any():
                occupied[x0 : x0 + w, y0 : y0 + h] = True
                boxes.append(BoxAnnotation(x0, y0, x0 + w - 1, y0 + h - 1, int(cat)))
                break
    return boxes


def _box_classes(cfg, domain, rng):
    allowed = np.array(cfg.present(domain))
    n = cfg.batch_size * cfg.boxes_per_image
    if cfg.box_class_mode == "cover":
        reps = int(np.ceil(n / len(allowed)))
        seq = np.concatenate([rng.permutation(allowed) for _ in range(reps)])[:n]
    else:
        seq = rng.choice(allowed, size=n)
    return seq.reshape(cfg.batch_size, cfg.boxes_per_image)


def _render(cfg, geom, boxes, domain, rng):
    d, w, h = cfg.feature_dim, cfg.map_width, cfg.map_height
    offset = geom.shift if domain is Domain.TARGET else np.zeros(d)
    scale = cfg.cov_scale_target if domain is Domain.TARGET else cfg.cov_scale_source
    values = offset[:, None, None] + cfg.background_scale * rng.standard_normal((d, w, h))
    label_map = np.zeros((w, h), dtype=np.int64)
    for b in boxes:
        bw, bh = b.x1 - b.x0 + 1, b.y1 - b.y0 + 1
        mean = geom.class_means[b.category] + offset
        values[:, b.x0 : b.x1 + 1, b.y0 : b.y1 + 1] = (
            mean[:, None, None] + scale * rng.standard_normal((d, bw, bh))
        )
        label_map[b.x0 : b.x1 + 1, b.y0 : b.y1 + 1] = b.category
    return FeatureMap(values, domain, label_map)


def generate_scenario(cfg, rng):
    """One batch of ``batch_size`` source images (with boxes) and target
    images (with template score maps)."""
    cfg.validate()
    geom = Geometry.from_config(cfg)
    source, target, scores = [], [], []
    src_cls = _box_classes(cfg, Domain.SOURCE, rng)
    tgt_cls = _box_classes(cfg, Domain.TARGET, rng)
    for i in range(cfg.batch_size):
        boxes = _place_boxes(cfg, src_cls[i], rng)
        source.append((_render(cfg, geom, boxes, Domain.SOURCE, rng), boxes))
    for i in range(cfg.batch_size):
        boxes = _place_boxes(cfg, tgt_cls[i], rng)
        fmap = _render(cfg, geom, boxes, Domain.TARGET, rng)
        target.append(fmap)
        scores.append(ScoreMap(geom.score(fmap.values, cfg)))
    if not any(boxes for _, boxes in source):
        raise ConfigError("source batch has no boxes")
    return ScenarioBatch(source, target, scores)


# ---------------------------------------------------------------------------
# vision-to-graph sampling
# ---------------------------------------------------------------------------


@dataclass
class SampledPixels:
    features: np.ndarray  # N x D_in
    labels: np.ndarray
    coords: np.ndarray  # N x 2 (x, y)
    pseudo: np.ndarray
    true_labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls, dim):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, dim)), z, np.zeros((0, 2), dtype=np.int64), z.astype(bool), z)

    @classmethod
    def concat(cls, parts, dim):
        if not parts:
            return cls.empty(dim)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("features", "labels", "coords", "pseudo", "true_labels")))


def foreground_budget(max_nodes, num_classes):
    """Largest foreground count whose background share still fits the cap."""
    return (max_nodes * (num_classes + 1)) // (num_classes + 2)


def _grid_sample(box, k, rng):
    """Stratified sample of ``k`` distinct pixels from an inclusive box.

    The box is cut into a ``ceil(sqrt(k))`` square grid of cells. Pixels are
    listed cell by cell (shuffled inside each cell) and picked systematically
    at spacing ``area / k`` from a uniform random start, so every cell gets
    its proportional share and every pixel has inclusion probability
    ``k / area``.
    """
    xs = np.arange(box.x0, box.x1 + 1)
    ys = np.arange(box.y0, box.y1 + 1)
    if k >= len(xs) * len(ys):
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)
    g = int(np.ceil(np.sqrt(k)))
    ordered = []
    for cx in np.array_split(xs, min(g, len(xs))):
        for cy in np.array_split(ys, min(g, len(ys))):
            gx, gy = np.meshgrid(cx, cy, indexing="ij")
            cell = np.stack([gx.ravel(), gy.ravel()], axis=1)
            ordered.append(cell[rng.permutation(len(cell))])
    ordered = np.concatenate(ordered)
    step = len(ordered) / k
    pos = np.floor(rng.uniform(0.0, step) + step * np.arange(k)).astype(np.int64)
    return ordered[pos].astype(np.int64)


def _gather(fmap, coords):
    if len(coords) == 0:
        return np.zeros((0, fmap.values.shape[0]))
    return fmap.values[:, coords[:, 0], coords[:, 1]].T.copy()


def _true_at(fmap, coords):
    if fmap.label_map is None or len(coords) == 0:
        return None
    return fmap.label_map[coords[:, 0], coords[:, 1]].astype(np.int64)


def _background(pool_mask, fg_count, num_classes, rng):
    pool = np.argwhere(pool_mask)
    n_bg = min(fg_count // (num_classes + 1), len(pool))
    if n_bg == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pick = np.sort(rng.choice(len(pool), size=n_bg, replace=False))
    return pool[pick].astype(np.int64)


def sample_source_nodes(fmap, boxes, max_nodes, num_classes, rng):
    """Grid-stratified foreground pixels inside each box plus a 1/(C+1) share
    of background pixels drawn outside all boxes."""
    if max_nodes < num_classes + 1:
        raise PreconditionError(f"max_nodes={max_nodes} must be >= C + 1 = {num_classes + 1}")
    for b in boxes:
        b.check(fmap.width, fmap.height)
    budget = foreground_budget(max_nodes, num_classes)
    inside = np.zeros((fmap.width, fmap.height), dtype=bool)
    for b in boxes:
        inside[b.x0 : b.x1 + 1, b.y0 : b.y1 + 1] = True
    quotas = [0] * len(boxes)
    if boxes:
        q, r = divmod(budget, len(boxes))
        by_area = sorted(range(len(boxes)), key=lambda i: -boxes[i].area)
        for rank, i in enumerate(by_area):
            quotas[i] = q + (1 if rank < r else 0)
    fg_coords, fg_labels = [], []
    for b, quota in zip(boxes, quotas):
        k = min(quota, b.area)
        if k == 0:
            continue
        c = _grid_sample(b, k, rng)
        fg_coords.append(c)
        fg_labels.append(np.full(len(c), b.category, dtype=np.int64))
    fg = np.concatenate(fg_coords) if fg_coords else np.zeros((0, 2), dtype=np.int64)
    labels = np.concatenate(fg_labels) if fg_labels else np.zeros(0, dtype=np.int64)
    bg = _background(~inside, len(fg), num_classes, rng)
    coords = np.concatenate([fg, bg])
    labels = np.concatenate([labels, np.zeros(len(bg), dtype=np.int64)])
    return SampledPixels(
        _gather(fmap, coords),
        labels,
        coords,
        np.zeros(len(labels), dtype=bool),
        labels.copy(),
    )


def sample_target_nodes(fmap, scores, max_nodes, num_classes, tau_fg=TAU_FG, tau_bg=TAU_BG, rng=None):
    """Pixels whose top class score exceeds ``tau_fg`` become pseudo-labeled
    foreground; a 1/(C+1) share of pixels below ``tau_bg`` become background.
    Pixels in between are never sampled."""
    if not 0.0 < tau_bg < tau_fg < 1.0:
        raise PreconditionError(f"need 0 < tau_bg < tau_fg < 1, got {tau_bg}, {tau_fg}")
    s = scores.values if isinstance(scores, ScoreMap) else np.asarray(scores)
    top = s.max(axis=0)
    arg = s.argmax(axis=0) + 1
    fg_pool = np.argwhere(top > tau_fg)
    budget = foreground_budget(max_nodes, num_classes)
    if len(fg_pool) > budget:
        fg_pool = fg_pool[np.sort(rng.choice(len(fg_pool), size=budget, replace=False))]
    fg = fg_pool.astype(np.int64)
    bg = _background(top < tau_bg, len(fg), num_classes, rng)
    coords = np.concatenate([fg, bg]) if len(fg) or len(bg) else np.zeros((0, 2), dtype=np.int64)
    labels = np.concatenate([arg[fg[:, 0], fg[:, 1]], np.zeros(len(bg), dtype=np.int64)])
    true = _true_at(fmap, coords)
    return SampledPixels(
        _gather(fmap, coords),
        labels.astype(np.int64),
        coords,
        np.ones(len(labels), dtype=bool),
        labels.copy() if true is None else true,
    )


def v2g_project(raw, params, prefix="v2g"):
    """Non-linear node projection ``Fc2(ReLU(LN(Fc1(x))))`` applied per row."""
    x = as_tensor(raw)
    w1 = params[f"{prefix}.fc1.weight"]
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ShapeError(f"v2g expects N x {w1.shape[0]} input, got {x.shape}")
    h = params.layer_norm(params.linear(x, f"{prefix}.fc1"), f"{prefix}.ln").relu()
    return params.linear(h, f"{prefix}.fc2")


def to_nodeset(sampled, params, domain, prefix="v2g"):
    return NodeSet(
        v2g_project(sampled.features, params, prefix),
        sampled.labels,
        domain,
        pseudo=sampled.pseudo,
        true_labels=sampled.true_labels,
    )
