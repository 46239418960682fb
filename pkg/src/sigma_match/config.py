"""Run configuration and its flat ``dotted.key = value`` text format.

Example::

    # comments start with '#'
    seed = 7
    loss.lambda1 = 0.1
    scenario.source_classes = 1,2,4

Unknown keys and invalid enum values raise :class:`ConfigError` naming the
key and what is accepted.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .synthetic import MAX_NODES_PER_MAP, TAU_BG, TAU_FG, ScenarioConfig


@dataclass
class ModelConfig:
    embed_dim: int = 32
    v2g_hidden: int = 32
    edge_dim: int = 32
    affinity_dim: int = 32
    mlp_hidden: int = 64
    cls_hidden: int = 32
    disc_hidden: int = 256


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda1: float = 0.1
    lambda2: float = 0.1
    qc_mode: str = "squared"
    matching: str = "single"  # single | bce | mse
    grl_coeff: float = 1.0
    na_reduction: str = "sum"  # sum | mean
    max_nodes: int = MAX_NODES_PER_MAP
    tau_fg: float = TAU_FG
    tau_bg: float = TAU_BG
    edge_drop: float = 0.1
    sinkhorn_iterations: int = 20
    completion: bool = True
    background_positive: bool = True
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 2000
    eval_every: int = 100
    eval_batches: int = 4
    seed: int = 7
    out_dir: str = "runs/default"
    oracle_instances: int = 100
    oracle_size: int = 5
    oracle_temperature: float = 0.01
    gradcheck_instances: int = 5
    gradcheck_embed_dim: int = 4
    gradcheck_max_nodes: int = 6
    gradcheck_map_size: int = 6
    gradcheck_entries: int = 6
    gradcheck_step: float = 1e-5
    gradcheck_tolerance: float = 1e-4
    gradcheck_corrupt_group: str = ""

    def validate(self):
        self.scenario.validate()
        if not 0.0 < self.tau_bg < self.tau_fg < 1.0:
            raise ConfigError("need 0 < sampling.tau_bg < sampling.tau_fg < 1")
        if not 0.0 <= self.edge_drop < 1.0:
            raise ConfigError("graph.edge_drop must be in [0, 1)")
        if self.max_nodes < self.scenario.num_classes + 1:
            raise ConfigError("sampling.max_nodes must be >= num_classes + 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.sinkhorn_iterations < 1:
            raise ConfigError("sinkhorn.iterations must be >= 1")
        return self

    def weights_label(self):
        return f"lambda1={self.lambda1:g},lambda2={self.lambda2:g}"


# dotted key -> (path into RunConfig, parser, accepted values or None)
def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _classes(s):
    s = s.strip()
    if s.lower() in ("", "all", "none"):
        return None
    return tuple(int(p) for p in s.split(",") if p.strip())


def _fmt_classes(v):
    return "all" if v is None else ",".join(str(c) for c in v)


_S = "scenario."
KEYS = {
    "seed": ("seed", int, None),
    "scenario.num_classes": (_S + "num_classes", int, None),
    "scenario.feature_dim": (_S + "feature_dim", int, None),
    "scenario.map_width": (_S + "map_width", int, None),
    "scenario.map_height": (_S + "map_height", int, None),
    "scenario.batch_size": (_S + "batch_size", int, None),
    "scenario.boxes_per_image": (_S + "boxes_per_image", int, None),
    "scenario.box_min": (_S + "box_min", int, None),
    "scenario.box_max": (_S + "box_max", int, None),
    "scenario.class_sep": (_S + "class_sep", float, None),
    "scenario.shift": (_S + "shift", float, None),
    "scenario.cov_scale_source": (_S + "cov_scale_source", float, None),
    "scenario.cov_scale_target": (_S + "cov_scale_target", float, None),
    "scenario.background_scale": (_S + "background_scale", float, None),
    "scenario.source_classes": (_S + "source_classes", _classes, None),
    "scenario.target_classes": (_S + "target_classes", _classes, None),
    "scenario.box_class_mode": (_S + "box_class_mode", str, ("random", "cover")),
    "scenario.score_gain": (_S + "score_gain", float, None),
    "scenario.score_offset": (_S + "score_offset", float, None),
    "model.embed_dim": ("model.embed_dim", int, None),
    "model.v2g_hidden": ("model.v2g_hidden", int, None),
    "model.edge_dim": ("model.edge_dim", int, None),
    "model.affinity_dim": ("model.affinity_dim", int, None),
    "model.mlp_hidden": ("model.mlp_hidden", int, None),
    "model.cls_hidden": ("model.cls_hidden", int, None),
    "model.disc_hidden": ("model.disc_hidden", int, None),
    "loss.lambda1": ("lambda1", float, None),
    "loss.lambda2": ("lambda2", float, None),
    "loss.qc_mode": ("qc_mode", str, ("squared", "literal")),
    "loss.matching": ("matching", str, ("single", "bce", "mse")),
    "loss.grl_coeff": ("grl_coeff", float, None),
    "loss.na_reduction": ("na_reduction", str, ("sum", "mean")),
    "sampling.max_nodes": ("max_nodes", int, None),
    "sampling.tau_fg": ("tau_fg", float, None),
    "sampling.tau_bg": ("tau_bg", float, None),
    "graph.edge_drop": ("edge_drop", float, None),
    "sinkhorn.iterations": ("sinkhorn_iterations", int, None),
    "completion.enabled": ("completion", _bool, ("true", "false")),
    "match.background_positive": ("background_positive", _bool, ("true", "false")),
    "optim.lr": ("lr", float, None),
    "optim.momentum": ("momentum", float, None),
    "optim.weight_decay": ("weight_decay", float, None),
    "train.steps": ("steps", int, None),
    "train.eval_every": ("eval_every", int, None),
    "train.eval_batches": ("eval_batches", int, None),
    "output.dir": ("out_dir", str, None),
    "oracle.instances": ("oracle_instances", int, None),
    "oracle.size": ("oracle_size", int, None),
    "oracle.temperature": ("oracle_temperature", float, None),
    "gradcheck.instances": ("gradcheck_instances", int, None),
    "gradcheck.embed_dim": ("gradcheck_embed_dim", int, None),
    "gradcheck.max_nodes": ("gradcheck_max_nodes", int, None),
    "gradcheck.map_size": ("gradcheck_map_size", int, None),
    "gradcheck.entries": ("gradcheck_entries", int, None),
    "gradcheck.step": ("gradcheck_step", float, None),
    "gradcheck.tolerance": ("gradcheck_tolerance", float, None),
    "gradcheck.corrupt_group": ("gradcheck_corrupt_group", str, None),
}


def _resolve(cfg, path):
    obj = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    return obj, parts[-1]


def set_value(cfg, key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}; accepted keys: {', '.join(sorted(KEYS))}")
    path, parse, accepted = KEYS[key]
    try:
        value = parse(raw)
    except ValueError:
        hint = f"; accepted: {', '.join(accepted)}" if accepted else ""
        raise ConfigError(f"invalid value {raw!r} for {key}{hint}") from None
    if accepted and parse is str and value not in accepted:
        raise ConfigError(f"invalid value {raw!r} for {key}; accepted: {', '.join(accepted)}")
    obj, attr = _resolve(cfg, path)
    setattr(obj, attr, value)


def get_value(cfg, key):
    obj, attr = _resolve(cfg, KEYS[key][0])
    return getattr(obj, attr)


def parse_config(text, base=None):
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    cfg.scenario = dataclasses.replace(cfg.scenario)
    cfg.model = dataclasses.replace(cfg.model)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, raw)
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg):
    """Every key with its resolved value, sorted; parses back to ``cfg``."""
    lines = []
    for key in sorted(KEYS):
        v = get_value(cfg, key)
        if key in ("scenario.source_classes", "scenario.target_classes"):
            s = _fmt_classes(v)
        elif isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"
