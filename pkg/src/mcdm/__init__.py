"""Masked conditional diffusion augmentation for face-forgery training data.

Generate free-form masks, train a mask-conditioned denoiser, inpaint the
masked region of real frames to mint hard fake examples, and score the
results (Fréchet feature distance, rank AUC, outside-mask preservation).
"""

from .diffusion import (
    NoiseSchedule,
    adaptive_combine,
    estimate_x0,
    forward_noise,
    make_condition,
    make_schedule,
    make_xt,
    reverse_step,
    sample,
)
from .evalmetrics import FeatureSet, ScoredLabels, auc, fid, outside_mask_error
from .features import FeatureExtractor, cosine_distance, extract, make_extractor
from .losses import BatchItem, TrainingConfig, loss_fea, loss_pixel, total_loss, train_step
from .masks import Mask, MaskGenParams, generate_random_mask, mask_coverage
from .model import Denoiser, DenoiserConfig, init_denoiser, load_checkpoint, predict_eps, save_checkpoint
from .seeding import derive_seed

__all__ = [
    "NoiseSchedule",
    "adaptive_combine",
    "estimate_x0",
    "forward_noise",
    "make_condition",
    "make_schedule",
    "make_xt",
    "reverse_step",
    "sample",
    "FeatureSet",
    "ScoredLabels",
    "auc",
    "fid",
    "outside_mask_error",
    "FeatureExtractor",
    "cosine_distance",
    "extract",
    "make_extractor",
    "BatchItem",
    "TrainingConfig",
    "loss_fea",
    "loss_pixel",
    "total_loss",
    "train_step",
    "Mask",
    "MaskGenParams",
    "generate_random_mask",
    "mask_coverage",
    "Denoiser",
    "DenoiserConfig",
    "init_denoiser",
    "load_checkpoint",
    "predict_eps",
    "save_checkpoint",
    "derive_seed",
]

__version__ = "0.1.0"
