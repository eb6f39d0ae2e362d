"""Single-image prediction with test-time batch-norm recalibration.

Every predictor runs forward passes only and never writes to the model; the
graph's arrays are read-only, so an accidental in-place update raises.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from augbn.augment import AugmentPlan, classification_plan, generate_augmented_batch
from augbn.errors import ConfigError, ShapeError
from augbn.model import PTN, FixedPrior, ModelGraph, MultiPrior, Source, forward
from augbn.normalization import DEFAULT_EPSILON
from augbn.tensor import as_tensor, softmax

DEFAULT_PRIORS = (0.0, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class AugBnConfig:
    lam: float = 0.7
    plan: AugmentPlan = field(default_factory=classification_plan)
    priors: tuple[float, ...] = DEFAULT_PRIORS
    k_top: int = 3
    epsilon: float = DEFAULT_EPSILON
    std_blend: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        priors = tuple(sorted({float(p) for p in self.priors}))
        if not priors or any(not 0.0 <= p <= 1.0 for p in priors):
            raise ConfigError(f"priors must be a non-empty set of values in [0, 1], got {self.priors}")
        object.__setattr__(self, "priors", priors)
        if not 1 <= self.k_top <= len(priors):
            raise ConfigError(f"k_top must lie in [1, {len(priors)}], got {self.k_top}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class PriorResult:
    prior: float
    class_id: int
    entropy: float


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    class_id: int
    entropy: float
    chosen_prior: float | None = None
    per_prior_detail: tuple[PriorResult, ...] | None = None


def entropy(probs) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("entropy expects a finite, non-negative probability vector")
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return min(max(h, 0.0), math.log(p.size))


def _prediction(logits: np.ndarray, **extra) -> Prediction:
    logits = np.asarray(logits, dtype=np.float32)
    probs = softmax(logits)
    return Prediction(logits, probs, int(np.argmax(probs)), entropy(probs), **extra)


def _single(image) -> np.ndarray:
    x = as_tensor(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected one image shaped (1, C, H, W), got {x.shape}")
    return x


def source_predict(model: ModelGraph, image) -> Prediction:
    return _prediction(forward(model, _single(image), Source())[0])


def ptn_predict(model: ModelGraph, image) -> Prediction:
    return _prediction(forward(model, _single(image), PTN())[0])


def sita_predict(model: ModelGraph, image, cfg: AugBnConfig = AugBnConfig()) -> Prediction:
    """AugBN prediction: one forward pass over the image and its augments, row 0 read out.

    Only BN layers masked as AugBN adapt; an all-source mask reproduces the source model.
    """
    batch = generate_augmented_batch(_single(image), cfg.plan)
    mode = FixedPrior(cfg.lam, cfg.std_blend, cfg.epsilon)
    return _prediction(forward(model, batch, mode)[0], chosen_prior=cfg.lam)


def vote(results: Sequence[PriorResult], k_top: int) -> PriorResult:
    """Majority vote over the ``k_top`` lowest-entropy priors.

    Ties in the vote go to the class whose best supporter has the lowest entropy,
    then to the lowest class index. Returns that best supporter.
    """
    if not 1 <= k_top <= len(results):
        raise ConfigError(f"k_top must lie in [1, {len(results)}]")
    top = sorted(results, key=lambda r: r.entropy)[:k_top]
    counts = Counter(r.class_id for r in top)
    best = {}
    for r in top:
        if r.class_id not in best or r.entropy < best[r.class_id].entropy:
            best[r.class_id] = r
    winner = min(counts, key=lambda c: (-counts[c], best[c].entropy, c))
    return best[winner]


def ops_predict(model: ModelGraph, image, cfg: AugBnConfig = AugBnConfig()) -> Prediction:
    """AugBN with per-image prior selection by output entropy.

    The same augmented batch is replicated once per prior and run in a single
    MultiPrior pass; row ``p * (n + 1)`` holds the prediction for prior ``p``.
    """
    batch = generate_augmented_batch(_single(image), cfg.plan)
    group = batch.shape[0]
    n_p = len(cfg.priors)
    tiled = np.tile(batch, (n_p, 1, 1, 1))
    logits = forward(model, tiled, MultiPrior(cfg.priors, cfg.std_blend, cfg.epsilon))
    rows = logits[::group]
    probs = softmax(rows)
    results = tuple(
        PriorResult(prior, int(np.argmax(p)), entropy(p)) for prior, p in zip(cfg.priors, probs)
    )
    chosen = vote(results, cfg.k_top)
    i = cfg.priors.index(chosen.prior)
    return Prediction(
        rows[i].astype(np.float32),
        probs[i],
        chosen.class_id,
        chosen.entropy,
        chosen_prior=chosen.prior,
        per_prior_detail=results,
    )


def aug_ensemble_predict(model: ModelGraph, image, plan: AugmentPlan | None = None) -> Prediction:
    """Average of source-model softmax outputs over the image and its augments."""
    plan = plan or classification_plan()
    batch = generate_augmented_batch(_single(image), plan)
    logits = forward(model, batch, Source())
    mean = softmax(logits).astype(np.float64).mean(axis=0)
    mean /= mean.sum()
    return Prediction(
        logits.mean(axis=0).astype(np.float32), mean, int(np.argmax(mean)), entropy(mean)
    )


def bn_prior_lambda(pseudo_count: float) -> float:
    """Source statistics as ``pseudo_count`` observations against one test image."""
    if pseudo_count < 0:
        raise ConfigError("pseudo count must be >= 0")
    return pseudo_count / (pseudo_count + 1.0)


def bn_baseline_predict(model: ModelGraph, image, pseudo_count: float = 16, cfg: AugBnConfig | None = None) -> Prediction:
    """Blend of source and single-image statistics without augmentation."""
    cfg = cfg or AugBnConfig()
    plan = replace(cfg.plan, n_augments=0)
    return sita_predict(model, image, replace(cfg, lam=bn_prior_lambda(pseudo_count), plan=plan))
