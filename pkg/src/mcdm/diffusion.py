"""Noise schedules and the mask-conditioned diffusion processes.

The forward direction only ever noises the masked region: the combine
step ``(1 - m) * base + m * overlay`` keeps every outside-mask cell equal
to the pristine image at all timesteps, and the reverse sampler re-pins
the outside region after every step so generated images inherit the
source pixels there bit-exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .masks import Mask
from .seeding import derive_seed

MaskLike = Union[Mask, np.ndarray, torch.Tensor]

COSINE_OFFSET = 0.008  # squared-cosine curve shift keeping beta_1 finite


@dataclass
class NoiseSchedule:
    """Per-timestep noising coefficients, 1-indexed: t in [1, T]."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("all betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not ((self.alpha_bars > 0) & (self.alpha_bars < 1)).all():
            raise ValueError("alpha_bar left (0, 1); schedule too aggressive for float64")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Build a noise schedule.

    linear: beta interpolates linearly from beta_min to beta_max.
    cosine: betas derived from the squared-cosine cumulative alpha_bar
    curve, clipped into [beta_min, beta_max].
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64)
        curve = np.cos((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
        curve /= curve[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")
    return NoiseSchedule(betas)


def schedule_csv(schedule: NoiseSchedule) -> str:
    """CSV dump (t, beta_t, alpha_bar_t) for plotting."""
    buf = io.StringIO()
    buf.write("t,beta,alpha_bar\n")
    for t in range(1, schedule.T + 1):
        buf.write(f"{t},{schedule.beta(t):.12g},{schedule.alpha_bar(t):.12g}\n")
    return buf.getvalue()


def _mask_tensor(mask: MaskLike, ref: torch.Tensor) -> torch.Tensor:
    """Broadcast a mask to ref's (..., H, W) layout as a float tensor."""
    if isinstance(mask, Mask):
        m = torch.from_numpy(mask.grid)
    elif isinstance(mask, np.ndarray):
        m = torch.from_numpy(np.ascontiguousarray(mask))
    else:
        m = mask
    m = m.to(dtype=ref.dtype, device=ref.device)
    if m.shape[-2:] != ref.shape[-2:]:
        raise ValueError(f"mask spatial shape {tuple(m.shape[-2:])} != image {tuple(ref.shape[-2:])}")
    return m


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def adaptive_combine(base: torch.Tensor, overlay: torch.Tensor, mask: MaskLike) -> torch.Tensor:
    """(1 - m) * base + m * overlay, mask broadcast over channels."""
    _check_same_shape(base, overlay)
    m = _mask_tensor(mask, base)
    return (1.0 - m) * base + m * overlay


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_same_shape(x0, eps)
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def make_condition(x0: torch.Tensor, mask: MaskLike, seed: int) -> torch.Tensor:
    """Condition image: x0 with the masked region swapped for fresh
    standard-normal noise. Deterministic given seed."""
    gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return adaptive_combine(x0, noise.to(x0.device), mask)


def make_xt(x0: torch.Tensor, mask: MaskLike, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noised state at step t: clean outside the mask, forward-noised inside."""
    return adaptive_combine(x0, forward_noise(x0, t, eps, schedule), mask)


def estimate_x0(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    mask: MaskLike,
    x0_known: torch.Tensor,
) -> torch.Tensor:
    """Single-step clean-image estimate from (x_t, predicted eps), with the
    outside-mask region taken from the known source."""
    _check_same_shape(x_t, eps_hat)
    _check_same_shape(x_t, x0_known)
    abar = schedule.alpha_bar(t)
    raw = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    return adaptive_combine(x0_known, raw, mask)


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """One ancestral denoising step; sigma_t^2 = beta_t, no noise at t = 1."""
    _check_same_shape(x_t, eps_hat)
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(schedule.alpha(t))
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype).to(x_t.device)
    return mean + np.sqrt(beta) * z


def sample(denoiser, x0: torch.Tensor, mask: MaskLike, schedule: NoiseSchedule, seed: int) -> torch.Tensor:
    """Regenerate the masked region of x0 by running the reverse chain.

    The state starts at the t = T forward marginal of x0 (pure noise inside
    the mask up to the vanishing sqrt(abar_T) * x0 term), the condition
    image is built once, and after every reverse step the outside-mask
    cells are re-pinned to x0. The final result is clamped to [-1, 1];
    clamping never runs mid-loop.
    """
    from .model import predict_eps  # deferred: model depends on this module

    cond_seed = derive_seed(seed, "cond")
    init_gen = torch.Generator().manual_seed(derive_seed(seed, "init") & (2**63 - 1))
    step_gen = torch.Generator().manual_seed(derive_seed(seed, "step") & (2**63 - 1))

    c0 = make_condition(x0, mask, cond_seed)
    eps = torch.randn(x0.shape, generator=init_gen, dtype=x0.dtype).to(x0.device)
    x = make_xt(x0, mask, schedule.T, eps, schedule)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = predict_eps(denoiser, x, c0, t)
            x = reverse_step(x, eps_hat, t, schedule, step_gen)
            x = adaptive_combine(x0, x, mask)
    return torch.clamp(x, -1.0, 1.0)
