"""Declarative run configuration: ``key = value`` lines plus CLI overrides.

Blank lines and ``#`` comments are ignored. Lists are comma separated. Every
key has a default, so an empty file is a valid config. The resolved config is
rendered back to canonical text, which is what reports embed and what the
fingerprint hashes.

Schema (key: type, default):

    arch: str, resnet-mini            class_count: int, 10
    data: path or "synthetic"         test_data: path or "synthetic"
    train_per_class: int, 500         test_per_class: int, 100
    image_size: int, 32               data_seed / test_seed: int, 1 / 2
    epochs, batch_size: int, 5 / 64   learning_rate: float, 0.05
    momentum, weight_decay: float     bn_momentum: float, 0.1
    lr_schedule: constant|cosine      seed: int, 0
    mode: source|ptn|bn16|augbn|augbn-ops|aug-ensemble
    lambda: float, 0.7                n_augments: int, 2
    compose_size: int, 5              pool: list of augmentation kinds
    blur_sigma: low,high              rotate_degrees: float
    jitter: b,c,s                     priors: list of floats
    k_top: int, 3                     epsilon: float, 1e-5
    std_blend: bool                   bn_mask: all|none|pattern like AASS
    pseudo_count: float, 16           augment_seed: int, 0
    corruptions: list of kinds        severity: int, 5
    corruption_seed: int, 3           limit: int, 0 (0 means all images)
    reps: int, 20                     workers: int, 1
    ghost_batch: int, 8               train_augment: none|flip-jitter
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from augbn.adapt import DEFAULT_PRIORS, AugBnConfig
from augbn.augment import KINDS, AugmentationOp, AugmentPlan
from augbn.data import CORRUPTION_KINDS
from augbn.errors import ConfigError
from augbn.trainer import TRAIN_AUGMENTS, TrainConfig

MODES = ("source", "ptn", "bn16", "augbn", "augbn-ops", "aug-ensemble")

# Config keys that differ from the Python field name.
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    arch: str = "resnet-mini"
    class_count: int = 10
    data: str = "synthetic"
    test_data: str = "synthetic"
    train_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 32
    data_seed: int = 1
    test_seed: int = 2
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bn_momentum: float = 0.1
    lr_schedule: str = "cosine"
    seed: int = 0
    mode: str = "augbn"
    lam: float = 0.7
    n_augments: int = 2
    compose_size: int = 5
    pool: tuple[str, ...] = ("color_jitter", "rotate", "mirror", "vflip", "hflip")
    blur_sigma: tuple[float, ...] = (0.5, 2.0)
    rotate_degrees: float = 30.0
    jitter: tuple[float, ...] = (0.4, 0.4, 0.4)
    priors: tuple[float, ...] = DEFAULT_PRIORS
    k_top: int = 3
    epsilon: float = 1e-5
    std_blend: bool = False
    bn_mask: str = "all"
    pseudo_count: float = 16.0
    augment_seed: int = 0
    corruptions: tuple[str, ...] = ("gaussian_noise", "contrast", "gaussian_blur")
    severity: int = 5
    corruption_seed: int = 3
    limit: int = 0
    reps: int = 20
    workers: int = 1
    ghost_batch: int = 8
    train_augment: str = "flip-jitter"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        bad = [k for k in self.pool if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown augmentation kinds {bad}; expected some of {KINDS}")
        bad = [k for k in self.corruptions if k not in CORRUPTION_KINDS]
        if bad:
            raise ConfigError(f"unknown corruption kinds {bad}; expected some of {CORRUPTION_KINDS}")
        if len(self.blur_sigma) != 2 or len(self.jitter) != 3:
            raise ConfigError("blur_sigma takes two values and jitter takes three")
        for name in ("class_count", "train_per_class", "test_per_class", "image_size", "reps", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.train_augment not in TRAIN_AUGMENTS:
            raise ConfigError(f"train_augment must be one of {tuple(TRAIN_AUGMENTS)}, got {self.train_augment!r}")
        if self.ghost_batch < 0:
            raise ConfigError("ghost_batch must be >= 0")
        if self.limit < 0:
            raise ConfigError("limit must be >= 0")
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity must lie in 1..5")

    # Derived objects. Their own validation raises ConfigError on bad values.

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            bn_momentum=self.bn_momentum,
            lr_schedule=self.lr_schedule,
            seed=self.seed,
            ghost_batch=self.ghost_batch,
        )

    def train_augment_fn(self):
        return TRAIN_AUGMENTS[self.train_augment]

    def augment_pool(self) -> tuple[AugmentationOp, ...]:
        ops = {
            "gaussian_blur": AugmentationOp("gaussian_blur", *self.blur_sigma),
            "rotate": AugmentationOp("rotate", -self.rotate_degrees, self.rotate_degrees),
            "color_jitter": AugmentationOp("color_jitter", jitter=tuple(self.jitter)),
            "hflip": AugmentationOp("hflip"),
            "vflip": AugmentationOp("vflip"),
            "mirror": AugmentationOp("mirror"),
        }
        return tuple(ops[k] for k in self.pool)

    def plan(self) -> AugmentPlan:
        return AugmentPlan(self.augment_pool(), self.compose_size, self.n_augments, self.augment_seed)

    def augbn_config(self) -> AugBnConfig:
        return AugBnConfig(self.lam, self.plan(), tuple(self.priors), self.k_top, self.epsilon, self.std_blend)


def _field_types() -> dict[str, object]:
    return {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str, kind) -> object:
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "tuple[str, ...]":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from None
    return text


def _field_name(key: str) -> str:
    key = key.strip().replace("-", "_")
    return _ALIASES.get(key, key)


def overrides_from_pairs(pairs: dict[str, str]) -> dict[str, object]:
    types = _field_types()
    out = {}
    for key, text in pairs.items():
        name = _field_name(key)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _convert(key, str(text), types[name])
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Apply string-valued (or already typed) overrides; ``None`` values are skipped."""
    typed = {}
    text_pairs = {}
    for key, value in pairs.items():
        if value is None:
            continue
        if isinstance(value, str):
            text_pairs[key] = value
        else:
            typed[_field_name(key)] = value
    typed.update(overrides_from_pairs(text_pairs))
    unknown = set(typed) - set(_field_types())
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return replace(cfg, **typed)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_lines(cfg: RunConfig) -> list[str]:
    inverse = {v: k for k, v in _ALIASES.items()}
    return [f"{inverse.get(f.name, f.name)} = {_render(getattr(cfg, f.name))}" for f in fields(cfg)]


def fingerprint(cfg: RunConfig, extra: str = "") -> str:
    """Short SHA-256 over the canonical config text (and any extra context, e.g. a model digest)."""
    text = "\n".join(resolved_lines(cfg)) + "\n" + extra
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
