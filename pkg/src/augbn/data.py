"""Datasets and algorithmic image corruptions.

Formats:
  * CIFAR-10 binary: records of 1 label byte + 3072 pixel bytes (R, G, B planes of 32x32).
  * Raw fixture: u32 count, u32 H, u32 W (little-endian), then per image
    1 label byte + 3*H*W pixel bytes in channel-plane order.

Pixels are stored as bytes and scaled by 1/255 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from augbn.augment import gaussian_blur, make_rng
from augbn.errors import ConfigError, DataFormatError
from augbn.tensor import DTYPE

CIFAR_RECORD = 1 + 3 * 32 * 32

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur", "contrast", "brightness", "pixelate")

# Severity tables, version 1. One entry per severity 1..5; pixels live in [0, 1].
SEVERITY_TABLE_VERSION = 1
SEVERITY_TABLES: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # noise std
    "shot_noise": (500, 250, 100, 60, 30),  # photon count
    "impulse_noise": (0.01, 0.03, 0.06, 0.10, 0.17),  # flipped fraction
    "gaussian_blur": (0.4, 0.6, 0.9, 1.3, 1.8),  # sigma at 32x32, scaled with image size
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.15),  # blend factor toward the image mean
    "brightness": (0.05, 0.10, 0.15, 0.22, 0.30),  # additive offset
    "pixelate": (0.9, 0.75, 0.6, 0.45, 0.3),  # downscale factor (box average down, nearest up)
}


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    label: int


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ConfigError(f"severity must lie in 1..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY_TABLES[self.kind][self.severity - 1]


# Loading and saving ------------------------------------------------------------


def _from_bytes(labels: np.ndarray, pixels: np.ndarray, h: int, w: int) -> list[LabeledImage]:
    images = pixels.reshape(-1, 1, 3, h, w).astype(DTYPE) / DTYPE(255.0)
    return [LabeledImage(img, int(lab)) for img, lab in zip(images, labels)]


def load_cifar10_binary(path) -> list[LabeledImage]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} exceeds 9")
    return _from_bytes(labels, records[:, 1:], 32, 32)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_cifar10_binary(dataset: Sequence[LabeledImage], path) -> None:
    rows = []
    for item in dataset:
        if item.image.shape != (1, 3, 32, 32) or not 0 <= item.label <= 9:
            raise DataFormatError("CIFAR-10 records need 3x32x32 images and labels 0..9")
        rows.append(np.concatenate([[item.label], _quantize(item.image).ravel()]).astype(np.uint8))
    np.stack(rows).tofile(path)


def save_raw(dataset: Sequence[LabeledImage], path) -> None:
    if not dataset:
        raise DataFormatError("cannot write an empty dataset")
    _, c, h, w = dataset[0].image.shape
    out = bytearray(struct.pack("<III", len(dataset), h, w))
    for item in dataset:
        if item.image.shape != (1, 3, h, w):
            raise DataFormatError("all images must share a (1, 3, H, W) shape")
        if not 0 <= item.label <= 255:
            raise DataFormatError(f"label {item.label} does not fit in a byte")
        out.append(item.label)
        out += _quantize(item.image).tobytes()
    Path(path).write_bytes(bytes(out))


def load_raw(path) -> list[LabeledImage]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise DataFormatError(f"{path}: missing raw fixture header")
    count, h, w = struct.unpack("<III", buf[:12])
    rec = 1 + 3 * h * w
    if h < 1 or w < 1 or len(buf) != 12 + count * rec:
        raise DataFormatError(f"{path}: expected {12 + count * rec} bytes for {count} images of {h}x{w}, got {len(buf)}")
    records = np.frombuffer(buf, dtype=np.uint8, offset=12).reshape(count, rec)
    return _from_bytes(records[:, 0], records[:, 1:], h, w)


def load_dataset(path) -> list[LabeledImage]:
    """Load a CIFAR-10 ``.bin`` file or a raw fixture, chosen by extension."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path} does not exist")
    if path.suffix == ".bin":
        return load_cifar10_binary(path)
    return load_raw(path)


def stack(dataset: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    images = np.concatenate([item.image for item in dataset], axis=0)
    labels = np.array([item.label for item in dataset], dtype=np.int64)
    return images, labels


# Synthetic data ------------------------------------------------------------------

_FREQS = (2.0, 3.0, 4.5, 6.0, 8.0)  # cycles per image width


def synthetic_dataset(class_count: int, per_class: int, image_size: int = 32, seed: int = 0) -> list[LabeledImage]:
    """Procedural gratings; each class has its own frequency and orientation family.

    Class ``c`` uses frequency ``_FREQS[c // 2]`` (extended geometrically past the
    table) and either axis-aligned (0/90 degree) or diagonal (45/135 degree)
    orientations. Both families are closed under flips and transposition, so the
    classification augmentation pool preserves labels. Phase, orientation jitter,
    color, contrast and background level are random; pixel noise is added last.
    """
    if class_count < 1 or per_class < 1 or image_size < 1:
        raise ConfigError("class_count, per_class and image_size must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    out = []
    for i in range(class_count * per_class):
        label = i % class_count
        fi = label // 2
        freq = _FREQS[fi] if fi < len(_FREQS) else _FREQS[-1] * 1.3 ** (fi - len(_FREQS) + 1)
        base = 0.0 if label % 2 == 0 else 45.0
        theta = np.deg2rad(base + 90.0 * rng.integers(2) + rng.uniform(-8, 8))
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi * freq / image_size
        wave = np.sin(k * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        amplitude = rng.uniform(0.2, 0.35)
        level = rng.uniform(0.35, 0.65)
        tint = rng.uniform(0.6, 1.0, size=(3, 1, 1))
        img = level + amplitude * tint * wave[None] + rng.normal(0, 0.04, (3, image_size, image_size))
        out.append(LabeledImage(np.clip(img, 0, 1).astype(DTYPE)[None], label))
    return out


# Corruptions ----------------------------------------------------------------------


def _area_matrix(n: int, m: int) -> np.ndarray:
    """(m, n) box-filter weights that average ``n`` pixels down to ``m`` cells."""
    edges = np.arange(m + 1) * (n / m)
    lo, hi = edges[:-1, None], edges[1:, None]
    pix = np.arange(n)[None, :]
    overlap = np.clip(np.minimum(hi, pix + 1) - np.maximum(lo, pix), 0, None)
    return overlap / (n / m)


def _pixelate(x: np.ndarray, factor: float) -> np.ndarray:
    """Box-average down to ``factor`` of the size, then nearest (center-aligned) back up."""
    _, _, h, w = x.shape
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (sh, sw) == (h, w):
        return x
    small = np.einsum("ih,nchw,jw->ncij", _area_matrix(h, sh), x, _area_matrix(w, sw))
    up_r = ((np.arange(h) + 0.5) * sh / h).astype(int)
    up_c = ((np.arange(w) + 0.5) * sw / w).astype(int)
    return small[:, :, up_r][:, :, :, up_c]


def apply_corruption(image, kind: str, parameter: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt ``image`` with an explicit parameter value (see SEVERITY_TABLES for units)."""
    x = np.asarray(image, dtype=np.float64)
    if kind == "gaussian_noise":
        y = x + rng.normal(0.0, parameter, x.shape) if parameter > 0 else x
    elif kind == "shot_noise":
        y = rng.poisson(np.clip(x, 0, 1) * parameter) / parameter
    elif kind == "impulse_noise":
        y = x.copy()
        hit = rng.random(x.shape) < parameter
        y[hit] = rng.integers(0, 2, size=int(hit.sum()))
    elif kind == "gaussian_blur":
        scaled = parameter * x.shape[-1] / 32.0
        y = gaussian_blur(x.astype(DTYPE), scaled).astype(np.float64)
    elif kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        y = mean + parameter * (x - mean)
    elif kind == "brightness":
        y = x + parameter
    elif kind == "pixelate":
        y = _pixelate(x, parameter)
    else:
        raise ConfigError(f"unknown corruption {kind!r}")
    return np.clip(y, 0.0, 1.0).astype(DTYPE)


def corrupt(item: LabeledImage, spec: CorruptionSpec) -> LabeledImage:
    return LabeledImage(apply_corruption(item.image, spec.kind, spec.parameter, make_rng(spec.seed)), item.label)


def corrupt_dataset(dataset: Sequence[LabeledImage], kind: str, severity: int, seed: int = 0) -> list[LabeledImage]:
    """Corrupt each image with its own stream, seeded by (seed, image index)."""
    out = []
    for i, item in enumerate(dataset):
        spec = CorruptionSpec(kind, severity, seed)
        rng = make_rng(np.random.SeedSequence([seed, i]))
        out.append(LabeledImage(apply_corruption(item.image, spec.kind, spec.parameter, rng), item.label))
    return out
