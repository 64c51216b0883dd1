"""Flat run configuration: defaults, plain-text parsing, and ablation presets.

Every field of TrainConfig is a key in the config file format, one
`key = value` pair per line. Unknown keys are rejected so that typos in
experiment files fail loudly instead of silently using a default.
"""

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class TrainConfig:
    # synthetic dataset
    n_classes: int = 20
    per_class: int = 500
    d_latent: int = 8
    d_image: int = 32
    d_text: int = 24
    noise_sigma: float = 0.25
    # pair-shared latent dimensions carrying no class information
    d_style: int = 8
    # text observation noise multiplier: captions are individually noisy
    text_noise_scale: float = 3.0
    # text-side offset norm as a multiple of the text per-entry RMS
    gap_scale: float = 0.0

    # frozen external teacher
    teacher_enabled: bool = True
    teacher_raw_dim: int = 64
    teacher_dim: int = 16

    # towers and heads
    d_z: int = 64
    d_h: int = 16
    tower_hidden: int = 128
    head_hidden: int = 64

    # optimization
    batch_size: int = 64
    episode_size: int = 2000
    n_epoch: int = 20
    warmup_episodes: int = 10
    lr_base: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    max_grad_norm: float = 1e5
    lock_image_fraction: float = 0.0

    # temperatures and prototype supervision
    tau_init: float = 0.07
    max_inv_tau: float = 100.0
    tau_y: float = 0.01
    images_per_prototype: int = 10
    kmeans_iters: int = 20
    sigma_augment: float = 0.1
    proto_enabled: bool = True
    pbt_enabled: bool = True
    soft_targets_enabled: bool = True

    # evaluation
    split_fraction: float = 0.2
    knn_k: int = 20
    probe_iters: int = 1000
    probe_lr: float = 0.1
    eval_kmeans_restarts: int = 10

    # seeds, one per independent random stream
    seed_data: int = 100
    seed_teacher: int = 200
    seed_params: int = 300
    seed_train: int = 400
    seed_eval: int = 500
    seed_split: int = 600
    seed_gap: int = 700


# Ablation arms. Each entry lists only the switches it flips relative to
# the full configuration; no-kmeans removes prototypical supervision
# entirely, which at the loss level coincides with the plain contrastive
# baseline.
PRESETS = {
    "full": {},
    "no-teacher": {"teacher_enabled": False},
    "no-pbt": {"pbt_enabled": False},
    "no-soft-target": {"soft_targets_enabled": False},
    "no-kmeans": {"proto_enabled": False, "teacher_enabled": False},
    "no-augmentation": {"sigma_augment": 0.0},
    "clip-only": {"proto_enabled": False, "teacher_enabled": False},
}

_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key]
    text = raw.strip()
    if kind is bool or kind == "bool":
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"key {key!r} expects a number, got {raw!r}") from None


def parse_config(text, base=None):
    """Parse `key = value` lines into a TrainConfig.

    Lines starting with '#' and blank lines are skipped. Unknown keys
    raise ConfigError. `base` supplies values for keys the text omits.
    """
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path, base=None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def format_config(cfg):
    """Render every field as one `key = value` line, parseable back."""
    lines = []
    for field in dataclasses.fields(TrainConfig):
        value = getattr(cfg, field.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{field.name} = {rendered}")
    return "\n".join(lines) + "\n"


def apply_preset(cfg, name):
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset {name!r}; choose one of: {known}")
    return dataclasses.replace(cfg, **PRESETS[name])


def apply_seed(cfg, seed):
    """Spread one master seed across the independent random streams."""
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    return dataclasses.replace(
        cfg,
        seed_data=seed,
        seed_teacher=seed + 1,
        seed_params=seed + 2,
        seed_train=seed + 3,
        seed_eval=seed + 4,
        seed_split=seed + 5,
        seed_gap=seed + 6,
    )


def validate(cfg):
    """Raise ConfigError on any out-of-range field; return cfg unchanged."""
    positive_ints = (
        "n_classes", "per_class", "d_latent", "d_image", "d_text",
        "teacher_raw_dim", "teacher_dim", "d_z", "d_h", "tower_hidden",
        "head_hidden", "batch_size", "episode_size", "warmup_episodes",
        "images_per_prototype", "knn_k", "probe_iters",
        "eval_kmeans_restarts",
    )
    for name in positive_ints:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if cfg.n_epoch < 0:
        raise ConfigError(f"n_epoch must be >= 0, got {cfg.n_epoch}")
    if cfg.d_style < 0:
        raise ConfigError(f"d_style must be >= 0, got {cfg.d_style}")
    if cfg.kmeans_iters < 0:
        raise ConfigError(f"kmeans_iters must be >= 0, got {cfg.kmeans_iters}")
    positive_floats = (
        "lr_base", "adam_eps", "max_grad_norm", "tau_init", "max_inv_tau",
        "tau_y", "probe_lr",
    )
    for name in positive_floats:
        if getattr(cfg, name) <= 0.0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)}")
    non_negative_floats = (
        "noise_sigma", "text_noise_scale", "gap_scale", "weight_decay",
        "sigma_augment",
    )
    for name in non_negative_floats:
        if getattr(cfg, name) < 0.0:
            raise ConfigError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {getattr(cfg, name)}")
    if not 0.0 < cfg.split_fraction < 1.0:
        raise ConfigError(f"split_fraction must lie in (0, 1), got {cfg.split_fraction}")
    if not 0.0 <= cfg.lock_image_fraction <= 1.0:
        raise ConfigError(
            f"lock_image_fraction must lie in [0, 1], got {cfg.lock_image_fraction}"
        )
    if cfg.teacher_dim > cfg.teacher_raw_dim:
        raise ConfigError(
            f"teacher_dim ({cfg.teacher_dim}) exceeds teacher_raw_dim "
            f"({cfg.teacher_raw_dim})"
        )
    if cfg.teacher_enabled and not cfg.pbt_enabled and cfg.teacher_dim != cfg.d_h:
        raise ConfigError(
            "with the teacher on and back-translation off, projected features are "
            f"scored directly against teacher-space centroids, so teacher_dim "
            f"({cfg.teacher_dim}) must equal d_h ({cfg.d_h})"
        )
    return cfg
