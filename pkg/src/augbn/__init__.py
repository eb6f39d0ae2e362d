"""Single-image test-time adaptation of batch-norm networks.

The public surface re-exported here covers the common workflow: build or load
a model, then predict one image at a time with AugBN or AugBN+OPS.
"""

from augbn.adapt import (
    DEFAULT_PRIORS,
    AugBnConfig,
    Prediction,
    aug_ensemble_predict,
    bn_baseline_predict,
    entropy,
    ops_predict,
    ptn_predict,
    sita_predict,
    source_predict,
)
from augbn.augment import AugmentationOp, AugmentPlan, classification_plan, generate_augmented_batch
from augbn.errors import AugBNError, ConfigError, DataFormatError, InvariantViolation, ShapeError
from augbn.model import PTN, FixedPrior, ModelGraph, MultiPrior, Source, build_reference_model, forward, set_bn_mode_mask
from augbn.normalization import AugWeights, BnParams, augbn_forward, bn_forward, combine_stats, weighted_target_stats
from augbn.tensor import ChannelStats
from augbn.weights import load_weights, save_weights

__version__ = "0.1.0"
