"""Batch-norm variants: source statistics, augmented-target statistics, and blends.

The AugBN layer estimates target statistics from one test image plus ``n``
augmented copies, weighting the original by 1/2 and each augment by 1/(2n),
then blends them with the stored source statistics using a prior ``lam``::

    mean = lam * source_mean + (1 - lam) * target_mean
    var  = lam * source_var  + (1 - lam) * target_var

The whole batch (original and augments) is normalized with the blended
statistics so that deeper AugBN layers see meaningful augment features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from augbn.errors import ShapeError
from augbn.tensor import ChannelStats, as_tensor

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if np.shape(self.gamma) != np.shape(self.beta) or np.ndim(self.gamma) != 1:
            raise ShapeError("gamma and beta must be vectors of equal length")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class AugWeights:
    """Convex weights over (original, augment_1, ..., augment_n)."""

    w: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "w", w)

    @classmethod
    def default(cls, n_augments: int) -> "AugWeights":
        if n_augments < 0:
            raise ValueError("n_augments must be >= 0")
        if n_augments == 0:
            return cls(np.ones(1))
        w = np.full(n_augments + 1, 1.0 / (2 * n_augments))
        w[0] = 0.5
        return cls(w)

    def __len__(self) -> int:
        return self.w.size


def _check_channels(x: np.ndarray, stats: ChannelStats) -> None:
    if x.shape[1] != stats.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, stats have {stats.channels}")


def _scale_shift(mean, var, gamma, beta, epsilon):
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + epsilon)
    return scale, np.asarray(beta, dtype=np.float64) - mean * scale


def _normalize(x, mean, var, gamma, beta, epsilon):
    """y = gamma * (x - mean) / sqrt(var + eps) + beta over channel axis 1 of NCHW ``x``."""
    scale, shift = _scale_shift(mean, var, gamma, beta, epsilon)
    scale = scale.reshape(-1, 1, 1).astype(x.dtype)
    shift = shift.reshape(-1, 1, 1).astype(x.dtype)
    return x * scale + shift


def bn_forward(x, stats: ChannelStats, params: BnParams) -> np.ndarray:
    """Inference-mode batch norm with fixed statistics."""
    x = as_tensor(x, 4)
    _check_channels(x, stats)
    if params.gamma.shape[0] != stats.channels:
        raise ShapeError("gamma length does not match stats")
    return _normalize(x, stats.mean, stats.variance, params.gamma, params.beta, params.epsilon)


def _grouped_target_stats(groups: np.ndarray, w: np.ndarray):
    """Weighted stats for groups shaped (P, n+1, C, H, W) -> two (P, C) float64 arrays.

    Uses var_about_weighted_mean = sum_i w_i * (var_i + (m_i - mu)^2), which is the
    exact decomposition of sum_i w_i * mean_hw((F_i - mu)^2).
    """
    p, r, c = groups.shape[:3]
    g = groups.reshape(p, r, c, -1)
    hw = g.shape[-1]
    # Two-pass moments in float64: deviations from the float64 row mean.
    row_mean = g.sum(axis=-1, dtype=np.float64) / hw
    dev = g - row_mean[..., None]
    row_var = np.einsum("prci,prci->prc", dev, dev, dtype=np.float64) / hw
    mu = np.einsum("i,pic->pc", w, row_mean)
    spread = row_var + (row_mean - mu[:, None, :]) ** 2
    var = np.einsum("i,pic->pc", w, spread)
    return mu, np.maximum(var, 0.0)


def weighted_target_stats(features, weights: AugWeights) -> ChannelStats:
    """Target statistics from the original feature map and its augments.

    Args:
        features: sequence of n+1 tensors shaped (1, C, H, W), or one (n+1, C, H, W)
            tensor; index 0 is the original image.
        weights: convex weights of length n+1.
    """
    if isinstance(features, np.ndarray):
        batch = as_tensor(features, 4)
    else:
        feats = [as_tensor(f, 4) for f in features]
        if any(f.shape != feats[0].shape for f in feats):
            raise ShapeError("all feature maps must share a shape")
        if feats[0].shape[0] != 1:
            raise ShapeError("each feature map must hold exactly one instance")
        batch = np.concatenate(feats, axis=0)
    if batch.shape[0] != len(weights):
        raise ShapeError(f"{batch.shape[0]} feature maps but {len(weights)} weights")
    mu, var = _grouped_target_stats(batch[None], weights.w)
    return ChannelStats(mu[0], var[0])


def _blend(src_mean, src_var, tgt_mean, tgt_var, lam, std_blend: bool):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim:
        lam = lam[:, None]
    mean = lam * src_mean + (1.0 - lam) * tgt_mean
    if std_blend:
        std = lam * np.sqrt(src_var) + (1.0 - lam) * np.sqrt(tgt_var)
        var = std * std
    else:
        var = lam * src_var + (1.0 - lam) * tgt_var
    return mean, var


def _check_prior(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"prior must lie in [0, 1], got {lam}")


def combine_stats(source: ChannelStats, target: ChannelStats, lam: float, std_blend: bool = False) -> ChannelStats:
    """Convex blend of source and target statistics.

    ``std_blend`` blends standard deviations instead of variances.
    """
    _check_prior(lam)
    if source.channels != target.channels:
        raise ShapeError("source and target stats differ in channel count")
    mean, var = _blend(
        source.mean.astype(np.float64),
        source.variance.astype(np.float64),
        target.mean.astype(np.float64),
        target.variance.astype(np.float64),
        lam,
        std_blend,
    )
    return ChannelStats(mean, np.maximum(var, 0.0))


def augbn_multiprior_forward(
    batch,
    source: ChannelStats,
    params: BnParams,
    priors: Sequence[float],
    weights: AugWeights | None = None,
    std_blend: bool = False,
) -> np.ndarray:
    """AugBN for ``len(priors)`` contiguous replicas of an (n+1)-image group.

    Replica ``p`` gets its own target statistics, blended with ``priors[p]``.
    Equivalent to one ``augbn_forward`` call per prior, in a single pass.
    """
    x = as_tensor(batch, 4)
    _check_channels(x, source)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1)
    n_p = priors.size
    if n_p < 1:
        raise ValueError("need at least one prior")
    for lam in priors:
        _check_prior(lam)
    if x.shape[0] % n_p:
        raise ShapeError(f"batch of {x.shape[0]} rows is not divisible into {n_p} replicas")
    group = x.shape[0] // n_p
    if weights is None:
        weights = AugWeights.default(group - 1)
    if len(weights) != group:
        raise ShapeError(f"replica has {group} rows but {len(weights)} weights")
    groups = x.reshape((n_p, group) + x.shape[1:])
    tgt_mean, tgt_var = _grouped_target_stats(groups, weights.w)
    mean, var = _blend(
        source.mean.astype(np.float64),
        source.variance.astype(np.float64),
        tgt_mean,
        tgt_var,
        priors,
        std_blend,
    )
    scale, shift = _scale_shift(mean, np.maximum(var, 0.0), params.gamma, params.beta, params.epsilon)
    scale = scale[:, None, :, None, None].astype(x.dtype)
    shift = shift[:, None, :, None, None].astype(x.dtype)
    return (groups * scale + shift).reshape(x.shape)


def augbn_forward(
    batch,
    source: ChannelStats,
    params: BnParams,
    lam: float,
    weights: AugWeights | None = None,
    std_blend: bool = False,
) -> np.ndarray:
    """AugBN over one group: row 0 is the original image, rows 1..n its augments."""
    return augbn_multiprior_forward(batch, source, params, [lam], weights, std_blend)
