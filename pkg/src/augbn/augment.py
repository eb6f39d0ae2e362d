"""Label-preserving augmentations and random composition.

Randomness comes from numpy's PCG64 bit generator. A plan's root seed is split
with ``SeedSequence.spawn`` so augment ``i`` always draws from the same child
stream regardless of how many augments precede it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from augbn.errors import ConfigError, ShapeError
from augbn.tensor import DTYPE, as_tensor

KINDS = ("gaussian_blur", "rotate", "color_jitter", "hflip", "vflip", "mirror")


def _image(img) -> np.ndarray:
    x = as_tensor(img)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected an image shaped (1, C, H, W), got {x.shape}")
    return x


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    out = np.zeros_like(x, dtype=np.float64)
    for i, k in enumerate(kernel):
        out += k * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), clamp-to-edge borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    x = _image(img)
    if sigma == 0:
        return x.copy()
    k = gaussian_kernel(sigma)
    y = _blur_axis(_blur_axis(x.astype(np.float64), k, 2), k, 3)
    return y.astype(DTYPE)


def rotate(img, angle: float) -> np.ndarray:
    """Counter-clockwise rotation about the image center.

    Multiples of 90 degrees are exact index permutations. Other angles use
    bilinear resampling with zeros outside the source frame.
    """
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    x = _image(img)
    quarter = angle / 90.0
    if quarter == round(quarter):
        return np.ascontiguousarray(np.rot90(x, k=int(round(quarter)) % 4, axes=(2, 3)))
    _, _, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # Inverse map: output pixel -> source coordinate (rows grow downward).
    dy, dx = yy - cy, xx - cx
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    # Gather the four bilinear taps from the flattened planes in one take.
    index, weight = [], []
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            index.append((np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).ravel())
            weight.append((wy * wx * valid).ravel())
    n, c = x.shape[:2]
    planes = x.reshape(n * c, h * w).astype(np.float64)
    taps = planes[:, np.stack(index)]  # (n*c, 4, h*w)
    out = np.einsum("rkp,kp->rp", taps, np.stack(weight))
    return out.reshape(x.shape).astype(DTYPE)


def horizontal_flip(img) -> np.ndarray:
    return np.ascontiguousarray(_image(img)[:, :, :, ::-1])


def vertical_flip(img) -> np.ndarray:
    return np.ascontiguousarray(_image(img)[:, :, ::-1, :])


def mirror_reflect(img) -> np.ndarray:
    """Reflect about the main diagonal (spatial transpose). Requires H == W."""
    x = _image(img)
    if x.shape[2] != x.shape[3]:
        raise ShapeError(f"mirror reflection needs a square image, got {x.shape[2]}x{x.shape[3]}")
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=1, keepdims=True)


def apply_color_jitter(img, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Apply explicit jitter factors in order brightness, contrast, saturation.

    Each step clamps to [0, 1].
    """
    x = _image(img).astype(np.float64)
    x = np.clip(x * brightness, 0.0, 1.0)
    mean = _gray(x).mean(axis=(2, 3), keepdims=True)
    x = np.clip(mean + contrast * (x - mean), 0.0, 1.0)
    gray = _gray(x)
    x = np.clip(gray + saturation * (x - gray), 0.0, 1.0)
    return x.astype(DTYPE)


def _jitter_factor(spread: float, rng: np.random.Generator) -> float:
    if not 0.0 <= spread < 1.0:
        raise ValueError(f"jitter spread must lie in [0, 1) so factors stay positive, got {spread}")
    return float(rng.uniform(1.0 - spread, 1.0 + spread))


def color_jitter(img, brightness: float, contrast: float, saturation: float, rng: np.random.Generator) -> np.ndarray:
    """Random brightness/contrast/saturation with factors drawn from [1-s, 1+s]."""
    factors = [_jitter_factor(s, rng) for s in (brightness, contrast, saturation)]
    return apply_color_jitter(img, *factors)


@dataclass(frozen=True)
class AugmentationOp:
    """One entry of an augmentation pool, with the ranges its parameters are drawn from.

    ``low``/``high`` bound the blur sigma (pixels) or the rotation angle (degrees);
    ``jitter`` holds the (brightness, contrast, saturation) spreads.
    """

    kind: str
    low: float = 0.0
    high: float = 0.0
    jitter: tuple[float, float, float] = (0.4, 0.4, 0.4)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if self.low > self.high:
            raise ConfigError(f"{self.kind}: low > high")
        if self.kind == "gaussian_blur" and self.low < 0:
            raise ConfigError("blur sigma must be non-negative")
        if self.kind == "color_jitter" and any(not 0 <= s < 1 for s in self.jitter):
            raise ConfigError("jitter spreads must lie in [0, 1)")

    def sample(self, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
        """Draw concrete parameters and return a deterministic image -> image function."""
        if self.kind == "gaussian_blur":
            sigma = float(rng.uniform(self.low, self.high))
            return _Bound("gaussian_blur", gaussian_blur, (sigma,))
        if self.kind == "rotate":
            angle = float(rng.uniform(self.low, self.high))
            return _Bound("rotate", rotate, (angle,))
        if self.kind == "color_jitter":
            factors = tuple(_jitter_factor(s, rng) for s in self.jitter)
            return _Bound("color_jitter", apply_color_jitter, factors)
        fn = {"hflip": horizontal_flip, "vflip": vertical_flip, "mirror": mirror_reflect}[self.kind]
        return _Bound(self.kind, fn, ())


@dataclass(frozen=True)
class _Bound:
    kind: str
    fn: Callable
    args: tuple

    def __call__(self, img):
        return self.fn(img, *self.args)


@dataclass(frozen=True)
class Composed:
    """Augmentations applied left to right."""

    ops: tuple

    def __call__(self, img) -> np.ndarray:
        x = _image(img)
        for op in self.ops:
            x = op(x)
        return x

    @property
    def kinds(self) -> list[str]:
        return [op.kind for op in self.ops]


def blur(low: float = 0.5, high: float = 2.0) -> AugmentationOp:
    return AugmentationOp("gaussian_blur", low, high)


def rotation(max_degrees: float = 30.0) -> AugmentationOp:
    return AugmentationOp("rotate", -max_degrees, max_degrees)


def jitter(brightness: float = 0.4, contrast: float = 0.4, saturation: float = 0.4) -> AugmentationOp:
    return AugmentationOp("color_jitter", jitter=(brightness, contrast, saturation))


def classification_pool() -> tuple[AugmentationOp, ...]:
    """Color distortion, rotation, mirror reflection, vertical and horizontal flip."""
    return (jitter(), rotation(), AugmentationOp("mirror"), AugmentationOp("vflip"), AugmentationOp("hflip"))


def segmentation_pool() -> tuple[AugmentationOp, ...]:
    return (blur(), rotation())


@dataclass(frozen=True)
class AugmentPlan:
    pool: tuple[AugmentationOp, ...] = field(default_factory=classification_pool)
    compose_size: int = 5
    n_augments: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))
        if not self.pool:
            raise ConfigError("augmentation pool is empty")
        if not 1 <= self.compose_size <= len(self.pool):
            raise ConfigError(f"compose_size must lie in [1, {len(self.pool)}], got {self.compose_size}")
        if self.n_augments < 0:
            raise ConfigError("n_augments must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def pool_size(self) -> int:
        return len(self.pool)

    def with_seed(self, seed: int) -> "AugmentPlan":
        return replace(self, seed=seed)


def classification_plan(seed: int = 0) -> AugmentPlan:
    return AugmentPlan(classification_pool(), compose_size=5, n_augments=2, seed=seed)


def segmentation_plan(seed: int = 0) -> AugmentPlan:
    return AugmentPlan(segmentation_pool(), compose_size=2, n_augments=1, seed=seed)


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def rand_choose_k(pool: Sequence[AugmentationOp], k: int, rng: np.random.Generator) -> Composed:
    """Pick ``k`` distinct ops uniformly, in uniformly random order, and sample their parameters."""
    if not 1 <= k <= len(pool):
        raise ConfigError(f"k must lie in [1, {len(pool)}], got {k}")
    # choice without replacement yields a uniformly random ordered k-subset.
    picks = rng.choice(len(pool), size=k, replace=False)
    return Composed(tuple(pool[int(i)].sample(rng) for i in picks))


def generate_augmented_batch(img, plan: AugmentPlan) -> np.ndarray:
    """Stack the original image with ``plan.n_augments`` independently composed augments."""
    x = _image(img)
    if x.shape[0] != 1:
        raise ShapeError(f"expected a single image, got {x.shape[0]}")
    rows = [x]
    children = np.random.SeedSequence(plan.seed).spawn(plan.n_augments)
    for child in children:
        composed = rand_choose_k(plan.pool, plan.compose_size, make_rng(child))
        rows.append(composed(x))
    return np.concatenate(rows, axis=0)
