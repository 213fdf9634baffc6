"""Typed experiment configuration backed by sectioned TOML files.

Unknown sections or keys are fatal. Defaults follow the CIFAR-100 recipe
(T=2, n=2, lambda_div=1e-5, lambda_fea=10, lambda_self=1e3, alpha=1,
Nesterov SGD 0.1/0.9/1e-4, Adam 1e-3 for self-distillation modules).
"""
import copy
import dataclasses
import hashlib
import json
import sys
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .exceptions import ConfigError

VARIANTS = ("independent", "dml", "ffsd_full", "ffsd_no_sd", "l2_div", "l2_div_sd")
DATASETS = ("synthetic", "cifar10", "cifar100")


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    path: str = ""
    num_classes: int = 10
    image_size: int = 32
    train_size: int = 5000
    test_size: int = 1000
    noise: float = 0.6
    per_class_limit: int = 0
    augment: bool = True
    pad: int = 4
    flip_p: float = 0.5
    workers: int = 0


@dataclass
class ModelConfig:
    widths: list = field(default_factory=lambda: [16, 32, 64])
    depth: int = 3


@dataclass
class DistillConfig:
    variant: str = "ffsd_full"
    n: int = 2
    temperature: float = 2.0
    lambda_div: float = 1e-5
    lambda_fea: float = 10.0
    lambda_self: float = 1e3
    alpha: float = 1.0
    kl_weight: float = 1.0
    leader_kl_target: str = "ensemble"


@dataclass
class OptimSpec:
    family: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    milestones: list = field(default_factory=lambda: [150, 225])
    gamma: float = 0.1
    warmup_epochs: int = 0
    warmup_start_lr: float = 0.0


def _sd_optim():
    return OptimSpec(family="adam", lr=1e-3, momentum=0.0, nesterov=False)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs/default"
    divergence_threshold: float = 1e4
    grad_clip: float = 0.0
    eval_batch_size: int = 500


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimSpec = field(default_factory=OptimSpec)
    sd_optim: OptimSpec = field(default_factory=_sd_optim)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def hash(self):
        return config_hash(self)

    def replace(self, **sections):
        new = copy.deepcopy(self)
        for section, values in sections.items():
            for key, value in values.items():
                _assign(new, section, key, value)
        validate(new)
        return new


# keys that never change results; left out of the identity hash
_HASH_EXCLUDE = {("train", "output_dir"), ("data", "workers")}


def config_hash(cfg):
    d = cfg.to_dict()
    for section, key in _HASH_EXCLUDE:
        d[section].pop(key, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_diff(a, b):
    da, db = a.to_dict(), b.to_dict()
    lines = []
    for section in da:
        for key in da[section]:
            if (section, key) in _HASH_EXCLUDE:
                continue
            if da[section][key] != db[section][key]:
                lines.append(f"{section}.{key}: {da[section][key]!r} != {db[section][key]!r}")
    return lines


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected list of ints, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _assign(cfg, section, key, value):
    sec = getattr(cfg, section)
    setattr(sec, key, _coerce(value, getattr(sec, key), f"{section}.{key}"))


def from_dict(d):
    cfg = ExperimentConfig()
    names = {f.name for f in dataclasses.fields(cfg)}
    unknown = []
    for section, values in d.items():
        if section not in names:
            unknown.append(section)
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section [{section}] must be a table")
        known = {f.name for f in dataclasses.fields(getattr(cfg, section))}
        unknown.extend(f"{section}.{k}" for k in values if k not in known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for section, values in d.items():
        for key, value in values.items():
            _assign(cfg, section, key, value)
    validate(cfg)
    return cfg


def validate(cfg):
    d, m, dist, tr = cfg.data, cfg.model, cfg.distill, cfg.train
    if d.dataset not in DATASETS:
        raise ConfigError(f"data.dataset must be one of {DATASETS}, got {d.dataset!r}")
    if d.dataset == "cifar10":
        d.num_classes = 10
    elif d.dataset == "cifar100":
        d.num_classes = 100
    if d.dataset != "synthetic":
        d.image_size = 32
        if not d.path:
            raise ConfigError("data.path is required for CIFAR datasets")
    if d.num_classes < 2:
        raise ConfigError("data.num_classes must be >= 2")
    if d.image_size < 4:
        raise ConfigError("data.image_size must be >= 4")
    if not 0 <= d.flip_p <= 1:
        raise ConfigError("data.flip_p must be in [0, 1]")
    if not m.widths or any(w < 1 for w in m.widths) or m.depth < 1:
        raise ConfigError("model.widths must be non-empty positive and model.depth >= 1")
    if dist.variant not in VARIANTS:
        raise ConfigError(f"distill.variant must be one of {VARIANTS}, got {dist.variant!r}")
    if dist.n < 1:
        raise ConfigError("distill.n must be >= 1")
    if dist.temperature < 1:
        raise ConfigError("distill.temperature must be >= 1")
    for name in ("lambda_div", "lambda_fea", "lambda_self", "alpha", "kl_weight"):
        if getattr(dist, name) < 0:
            raise ConfigError(f"distill.{name} must be non-negative")
    if dist.leader_kl_target not in ("ensemble", "fusion"):
        raise ConfigError("distill.leader_kl_target must be 'ensemble' or 'fusion'")
    for section in ("optim", "sd_optim"):
        o = getattr(cfg, section)
        if o.family not in ("sgd", "adam"):
            raise ConfigError(f"{section}.family must be 'sgd' or 'adam'")
        if o.lr <= 0:
            raise ConfigError(f"{section}.lr must be > 0")
        if not 0 < o.gamma < 1:
            raise ConfigError(f"{section}.gamma must be in (0, 1)")
        if sorted(o.milestones) != o.milestones:
            raise ConfigError(f"{section}.milestones must be increasing")
    if tr.epochs < 1 or tr.batch_size < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    return cfg


def loads(text):
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict(d)


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("ffsd.configs").iterdir() if p.name.endswith(".toml"))


def load_config(name_or_path):
    """Load a config from a TOML path or a bundled preset name (e.g. ``desk_smoke``)."""
    p = Path(name_or_path)
    if p.is_file():
        return loads(p.read_text())
    preset = resources.files("ffsd.configs").joinpath(f"{name_or_path}.toml")
    if preset.is_file():
        return loads(preset.read_text())
    raise ConfigError(f"no config file or preset named {str(name_or_path)!r} (presets: {', '.join(preset_names())})")


def save_config(cfg, path):
    Path(path).write_text(cfg.to_toml())


def parse_override(text):
    """``"distill.n=3"`` -> ``("distill", "n", 3)``; the value is parsed as TOML."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def apply_overrides(cfg, overrides):
    d = cfg.to_dict()
    for item in overrides:
        section, key, value = parse_override(item)
        d.setdefault(section, {})[key] = value
    return from_dict(d)


def derive_seed(master, *labels):
    """Per-component seed from the master seed and string labels.

    Each label is hashed with CRC-32 and mixed with the master seed through
    ``numpy.random.SeedSequence``; the first 32-bit word of its state is used.
    """
    key = [int(master)] + [zlib.crc32(str(lab).encode()) for lab in labels]
    return int(np.random.SeedSequence(key).generate_state(1)[0])
