"""Frozen feature extractors and the cosine distance they feed.

The feature-space reconstruction loss only needs a fixed, deterministic,
differentiable map from images to vectors. The default is a seeded stack
of strided random-weight convolutions ("toy-random-projection"); trained
weights can be dropped in via the "small-trained-cnn" and "external"
kinds without touching the loss code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
from torch import nn

EXTRACTOR_KINDS = ("toy-random-projection", "small-trained-cnn", "external")


class DegenerateFeatureError(ValueError):
    """A feature vector with zero norm makes cosine distance undefined."""


@dataclass
class FeatureExtractor:
    kind: str
    dim: int
    image_size: int
    image_channels: int
    seed: int
    module: nn.Module

    def __post_init__(self) -> None:
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)


def _small_cnn(image_channels: int, image_size: int, dim: int) -> nn.Module:
    probe = torch.zeros(1, image_channels, image_size, image_size)
    trunk = nn.Sequential(
        nn.Conv2d(image_channels, 16, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Flatten(),
    )
    with torch.no_grad():
        flat = trunk(probe).shape[1]
    return nn.Sequential(*trunk, nn.Linear(flat, dim))


def make_extractor(
    kind: str,
    image_size: int,
    image_channels: int = 3,
    dim: int = 256,
    seed: int = 0,
    checkpoint=None,
) -> FeatureExtractor:
    """Build a frozen extractor of the requested kind.

    toy-random-projection: random weights from ``seed``, no checkpoint.
    small-trained-cnn: the same small topology with a state-dict loaded
    from ``checkpoint``. external: a TorchScript module loaded from
    ``checkpoint`` that maps (B, C, H, W) to (B, dim).
    """
    if kind not in EXTRACTOR_KINDS:
        raise ValueError(f"unknown extractor kind {kind!r}, expected one of {EXTRACTOR_KINDS}")
    if kind == "toy-random-projection":
        with torch.random.fork_rng():
            torch.manual_seed(int(seed) & (2**63 - 1))
            module = _small_cnn(image_channels, image_size, dim)
    elif kind == "small-trained-cnn":
        if checkpoint is None:
            raise ValueError("small-trained-cnn requires a checkpoint path")
        module = _small_cnn(image_channels, image_size, dim)
        module.load_state_dict(torch.load(checkpoint, map_location="cpu", weights_only=True))
    else:
        if checkpoint is None:
            raise ValueError("external extractor requires a checkpoint path")
        module = torch.jit.load(str(checkpoint), map_location="cpu")
    return FeatureExtractor(kind, dim, image_size, image_channels, seed, module)


def extract(extractor: FeatureExtractor, image: torch.Tensor) -> torch.Tensor:
    """Map a (C, H, W) image (or a (B, C, H, W) batch) to feature vectors."""
    single = image.ndim == 3
    batch = image.unsqueeze(0) if single else image
    expected = (extractor.image_channels, extractor.image_size, extractor.image_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"extractor configured for {expected}, got {tuple(image.shape)}")
    feats = extractor.module(batch)
    if feats.ndim != 2 or feats.shape[1] != extractor.dim:
        raise ValueError(f"extractor returned shape {tuple(feats.shape)}, expected (B, {extractor.dim})")
    if not torch.isfinite(feats).all():
        raise FloatingPointError("extractor produced non-finite features")
    return feats[0] if single else feats


def cosine_distance(u, v) -> torch.Tensor:
    """1 - cos(u, v) as a 0-d tensor; range [0, 2]; differentiable."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"feature vectors must share a 1-D shape, got {tuple(u.shape)} vs {tuple(v.shape)}")
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if float(nu.detach()) == 0.0 or float(nv.detach()) == 0.0:
        raise DegenerateFeatureError("zero-norm feature vector")
    return 1.0 - torch.dot(u, v) / (nu * nv)
