"""Experiment settings: dataclass defaults <- named preset <- YAML config file <- flags.

Presets live in presets.yaml (see config.PRESETS_PATH); a config file is a flat YAML
mapping using the same keys as ExperimentConfig.
"""
from dataclasses import asdict, dataclass, fields, replace
import logging
import math
from pathlib import Path

import yaml

import config
from inemo.errors import InvalidArgumentError, NotFoundError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0

    # model
    feature_dim: int = 128
    max_classes: int = 100
    target_vertices: int = 1100
    neighborhood_scale: float = 0.2  # R as a fraction of the cuboid diagonal
    population_size: int = 0  # 0 -> 16 * target_vertices * max_classes, capped
    bg_capacity: int = 256
    bg_update: int = 8
    unused_pool_size: int = 512

    # loss and optimisation
    kappa1: float = 1.0 / 0.07
    kappa2: float = 1.0
    kappa3: float = 0.5
    lambda_etf: float = 0.2
    lambda_kd: float = 2.0
    eta: float = 0.9
    epochs_per_task: int = 50
    lr: float = 1e-3
    lr_halve_after: int = 10
    weight_decay: float = 1e-4
    batch_size: int = 16

    # method switches (all off = finetune baseline)
    replay: bool = True
    kd: bool = True
    etf: bool = True
    replay_momentum: bool = True
    latent_init: str = "etf"  # "etf": allocate from the class partition; "random": unit sphere
    confusion: bool = True  # confusion term in the classification score

    # replay buffer
    buffer_capacity: int = 240
    azimuth_bins: int = 8

    # data
    data: str = ""
    num_classes: int = 8
    per_class_train: int = 100
    per_class_test: int = 20
    split_spec: str = "B0+2"
    image_size: int = 64
    viewport_scale: float = 2.85
    distance: float = 5.0
    noise_level: float = 0.0
    azimuth_mode: str = "uniform"
    occlusion: str = ""

    # pose estimation and evaluation
    template_count: int = 144
    refine_iterations: int = 30
    refine_lr: float = 0.05
    refine_beta1: float = 0.4
    refine_beta2: float = 0.6
    refine_sigma: float = 1.0  # soft-assignment width in feature pixels
    threshold_coarse: float = math.pi / 6
    threshold_fine: float = math.pi / 18

    @property
    def finetune(self):
        return not (self.replay or self.kd or self.etf)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_OCCLUSION_LEVELS = ("", "l1", "l2", "l3")


def _load_yaml(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"Config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{path} must hold a mapping, got {type(data).__name__}")
    return data


def load_presets(path=None):
    return _load_yaml(path or config.PRESETS_PATH)


def preset_names(path=None):
    return sorted(k for k, v in load_presets(path).items() if isinstance(v, dict))


def _coerce(name, value):
    kind = _FIELDS[name].type
    if value is None:
        return None
    try:
        if kind in (bool, "bool"):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return lowered in ("1", "true", "yes", "on")
            return bool(value)
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise InvalidArgumentError(f"Config key {name!r}: cannot use {value!r}") from None


def _apply(cfg, mapping, source):
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise InvalidArgumentError(f"Unknown config key(s) in {source}: {', '.join(unknown)}")
    nested = sorted(k for k, v in mapping.items() if isinstance(v, (dict, list)))
    if nested:
        raise InvalidArgumentError(f"Config key(s) in {source} must hold plain values: {', '.join(nested)}")
    changes = {k: _coerce(k, v) for k, v in mapping.items() if v is not None}
    return replace(cfg, **changes)


def validate(cfg):
    """Range-check every field; raise InvalidArgumentError on the first problem."""
    positive = (
        "feature_dim", "target_vertices", "bg_capacity", "kappa1", "kappa2", "kappa3",
        "epochs_per_task", "lr", "batch_size", "azimuth_bins", "num_classes", "image_size",
        "viewport_scale", "distance", "template_count", "refine_iterations", "refine_lr", "refine_sigma",
        "threshold_coarse", "threshold_fine", "per_class_train",
    )
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise InvalidArgumentError(f"{name} must be positive, got {getattr(cfg, name)}")
    non_negative = (
        "lambda_etf", "lambda_kd", "weight_decay", "bg_update", "unused_pool_size",
        "buffer_capacity", "population_size", "per_class_test", "noise_level",
        "neighborhood_scale", "lr_halve_after",
    )
    for name in non_negative:
        if getattr(cfg, name) < 0:
            raise InvalidArgumentError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.eta <= 1.0:
        raise InvalidArgumentError(f"eta must be in [0, 1], got {cfg.eta}")
    for name in ("refine_beta1", "refine_beta2"):
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise InvalidArgumentError(f"{name} must be in [0, 1), got {getattr(cfg, name)}")
    if cfg.max_classes < 2 or cfg.max_classes > cfg.feature_dim:
        raise InvalidArgumentError(
            f"max_classes must be in [2, feature_dim={cfg.feature_dim}], got {cfg.max_classes}"
        )
    if cfg.num_classes > cfg.max_classes:
        raise InvalidArgumentError(f"num_classes {cfg.num_classes} exceeds max_classes {cfg.max_classes}")
    if cfg.bg_update > cfg.bg_capacity:
        raise InvalidArgumentError(f"bg_update {cfg.bg_update} exceeds bg_capacity {cfg.bg_capacity}")
    if cfg.image_size < 8:
        raise InvalidArgumentError(f"image_size must be >= 8, got {cfg.image_size}")
    if cfg.latent_init not in ("etf", "random"):
        raise InvalidArgumentError(f"latent_init must be 'etf' or 'random', got {cfg.latent_init!r}")
    if cfg.azimuth_mode not in ("uniform", "biased"):
        raise InvalidArgumentError(f"azimuth_mode must be 'uniform' or 'biased', got {cfg.azimuth_mode!r}")
    if cfg.occlusion.lower() not in _OCCLUSION_LEVELS:
        raise InvalidArgumentError(f"occlusion must be one of l1, l2, l3, got {cfg.occlusion!r}")
    if cfg.kappa3 >= 1.0:
        log.warning("kappa3=%.3g >= 1; distillation targets will be sharply peaked", cfg.kappa3)
    return cfg


def resolve_config(preset=None, config_path=None, overrides=None, presets_path=None):
    """Build a validated ExperimentConfig from the layered sources."""
    cfg = ExperimentConfig()
    presets = load_presets(presets_path)
    name = preset or presets.get("default")
    if name:
        if name not in presets or not isinstance(presets[name], dict):
            raise InvalidArgumentError(f"Unknown preset {name!r}; available: {', '.join(preset_names(presets_path))}")
        cfg = _apply(cfg, presets[name], f"preset {name!r}")
    if config_path:
        cfg = _apply(cfg, _load_yaml(config_path), str(config_path))
    if overrides:
        cfg = _apply(cfg, overrides, "command line")
    return validate(cfg)


def from_dict(data):
    """Strict rebuild from a config echo (checkpoints, reports)."""
    return validate(_apply(ExperimentConfig(), data, "config echo"))


def config_echo(cfg):
    return asdict(cfg)
