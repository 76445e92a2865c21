"""Training objective and the single optimizer step.

Total loss = lambda1 * pixel loss + lambda2 * feature loss. The pixel
term supervises noise prediction over the full tensor; the feature term
compares frozen-extractor features of the source against a one-step
reconstruction, so its gradient reaches the denoiser through the
predicted noise.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np
import torch

from .diffusion import MaskLike, NoiseSchedule, estimate_x0, make_condition, make_xt
from .features import FeatureExtractor, cosine_distance, extract
from .model import Denoiser
from .seeding import derive_seed


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 0.001
    learning_rate: float = 5e-5
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class BatchItem:
    """One training example: a clean image, its mask, and the seed that
    fixes every random draw (t, forward noise, condition noise) for it."""

    x0: torch.Tensor
    mask: MaskLike
    seed: int


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the batch seeds so the step can be replayed."""

    def __init__(self, message: str, seeds: Sequence[int]):
        super().__init__(f"{message} (replay seeds: {list(seeds)})")
        self.seeds = list(seeds)


Scalar = Union[float, torch.Tensor]


def loss_pixel(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise, all elements."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return torch.mean((eps - eps_hat) ** 2)


def loss_fea(x0: torch.Tensor, x0_tilde: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Cosine distance between extractor features of source and estimate."""
    if x0.shape != x0_tilde.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_tilde.shape)}")
    return cosine_distance(extract(extractor, x0), extract(extractor, x0_tilde))


def total_loss(lp: Scalar, lf: Scalar, config: TrainingConfig) -> Scalar:
    for name, value in (("loss_pixel", lp), ("loss_fea", lf)):
        finite = torch.isfinite(value).all() if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise FloatingPointError(f"{name} is non-finite")
    return config.lambda1 * lp + config.lambda2 * lf


def train_step(
    denoiser: Denoiser,
    batch: Sequence[BatchItem],
    schedule: NoiseSchedule,
    extractor: FeatureExtractor,
    config: TrainingConfig,
    optimizer: torch.optim.Optimizer,
) -> Dict[str, object]:
    """Run one optimizer update on a batch and return step metrics.

    Every random draw is derived from the item seeds, so a (model state,
    batch seeds) pair replays the step bit-exactly.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    config.validate()
    denoiser.train()

    ts, xts, c0s, eps_list = [], [], [], []
    for item in batch:
        t_rng = np.random.default_rng(derive_seed(item.seed, "t"))
        t = int(t_rng.integers(1, schedule.T + 1))
        eps_gen = torch.Generator().manual_seed(derive_seed(item.seed, "eps") & (2**63 - 1))
        eps = torch.randn(item.x0.shape, generator=eps_gen, dtype=item.x0.dtype)
        ts.append(t)
        eps_list.append(eps)
        xts.append(make_xt(item.x0, item.mask, t, eps, schedule))
        c0s.append(make_condition(item.x0, item.mask, derive_seed(item.seed, "cond")))

    eps_hat = denoiser(torch.stack(xts), torch.stack(c0s), torch.tensor(ts))
    lp = loss_pixel(torch.stack(eps_list), eps_hat)

    fea_terms = []
    for i, item in enumerate(batch):
        x0_tilde = estimate_x0(xts[i], eps_hat[i], ts[i], schedule, item.mask, item.x0)
        fea_terms.append(loss_fea(item.x0, x0_tilde, extractor))
    lf = torch.stack(fea_terms).mean()

    try:
        loss = total_loss(lp, lf, config)
    except FloatingPointError as err:
        raise DivergenceError(str(err), [item.seed for item in batch]) from err
    if not torch.isfinite(loss):
        raise DivergenceError("total loss is non-finite", [item.seed for item in batch])

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    return {
        "loss": float(loss.detach()),
        "loss_pixel": float(lp.detach()),
        "loss_fea": float(lf.detach()),
        "t_histogram": dict(Counter(ts)),
    }
