"""Conditional noise-prediction network.

A compact multi-scale encoder-decoder: the noisy state and the condition
image are fused along the channel axis at the input (2C channels in, C
out), each resolution level carries one residual block with a learned
per-level time projection, skips connect encoder to decoder, and a single
self-attention stage sits at the lowest resolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Tuple, Union

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "mcdm-ckpt-v1"
_CKPT_MAGIC = b"mcdm-ckpt-v1\n"


@dataclass
class DenoiserConfig:
    image_channels: int = 3
    base_width: int = 32
    depth: int = 3
    time_embed_dim: int = 128
    channel_multipliers: Tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.channel_multipliers:
            self.channel_multipliers = tuple(2**i for i in range(self.depth))
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)

    def validate(self) -> None:
        if self.image_channels < 1:
            raise ValueError("image_channels must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.channel_multipliers) != self.depth:
            raise ValueError(
                f"channel_multipliers length {len(self.channel_multipliers)} != depth {self.depth}"
            )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even and >= 2")


def time_embedding(t: Union[int, torch.Tensor], dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Interleaved sin/cos embedding of the timestep.

    Frequencies are geometrically spaced from 1 down to 1e-4; the slowest
    component keeps the map injective over any practical step range.
    """
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be even and >= 2")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if (tt < 1).any():
        raise ValueError("timesteps must be >= 1")
    half = dim // 2
    if half == 1:
        freqs = torch.tensor([1e-4], dtype=torch.float64)
    else:
        freqs = torch.pow(10000.0, -torch.arange(half, dtype=torch.float64) / (half - 1))
    phase = tt[:, None] * freqs[None, :]
    emb = torch.empty((tt.shape[0], dim), dtype=torch.float64)
    emb[:, 0::2] = torch.sin(phase)
    emb[:, 1::2] = torch.cos(phase)
    emb = emb.to(dtype)
    return emb[0] if scalar else emb


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        n = self.norm(x)
        q = self.q(n).reshape(b, c, h * w)
        k = self.k(n).reshape(b, c, h * w)
        v = self.v(n).reshape(b, c, h * w)
        attn = torch.softmax(q.transpose(1, 2) @ k / np.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Noise estimator eps(x_t, t, c0); input is concat(x_t, c0) on channels."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * m for m in config.channel_multipliers]
        tdim = config.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.in_conv = nn.Conv2d(2 * config.image_channels, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.depth):
            in_w = widths[i - 1] if i > 0 else widths[0]
            self.enc_blocks.append(ResidualBlock(in_w, widths[i], tdim))
            if i < config.depth - 1:
                self.downs.append(nn.Conv2d(widths[i], widths[i], 3, stride=2, padding=1))

        self.mid_block1 = ResidualBlock(widths[-1], widths[-1], tdim)
        self.mid_attn = SelfAttention2d(widths[-1])
        self.mid_block2 = ResidualBlock(widths[-1], widths[-1], tdim)

        self.dec_blocks = nn.ModuleList(ResidualBlock(2 * widths[i], widths[i], tdim) for i in range(config.depth))
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2) for i in range(1, config.depth)
        )

        self.out_norm = nn.GroupNorm(_norm_groups(widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.image_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, c0: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x_t.shape != c0.shape:
            raise ValueError(f"x_t shape {tuple(x_t.shape)} != c0 shape {tuple(c0.shape)}")
        if x_t.ndim != 4 or x_t.shape[1] != cfg.image_channels:
            raise ValueError(f"expected (B, {cfg.image_channels}, H, W), got {tuple(x_t.shape)}")
        h_img, w_img = x_t.shape[-2:]
        factor = 2 ** (cfg.depth - 1)
        if h_img % factor or w_img % factor:
            raise ValueError(f"H, W must be divisible by {factor} for depth {cfg.depth}, got {h_img}x{w_img}")

        dtype = self.in_conv.weight.dtype
        temb = self.time_mlp(time_embedding(t, cfg.time_embed_dim, dtype=dtype).to(x_t.device))
        x = self.in_conv(torch.cat([x_t, c0], dim=1))

        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x, temb)
            skips.append(x)
            if i < cfg.depth - 1:
                x = self.downs[i](x)

        x = self.mid_block1(x, temb)
        x = self.mid_attn(x)
        x = self.mid_block2(x, temb)

        for i in range(cfg.depth - 1, -1, -1):
            x = self.dec_blocks[i](torch.cat([x, skips[i]], dim=1), temb)
            if i > 0:
                x = self.ups[i - 1](x)

        return self.out_conv(nn.functional.silu(self.out_norm(x)))


def init_denoiser(config: DenoiserConfig) -> Denoiser:
    """Build a denoiser with parameters seeded from config.seed; equal
    configs yield bit-identical parameters."""
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(int(config.seed) & (2**63 - 1))
        model = Denoiser(config)
    model.eval()
    return model


def predict_eps(denoiser: Denoiser, x_t: torch.Tensor, c0: torch.Tensor, t: int) -> torch.Tensor:
    """Per-image noise prediction for a (C, H, W) state/condition pair."""
    if x_t.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {tuple(x_t.shape)}")
    if int(t) < 1:
        raise IndexError(f"timestep {t} must be >= 1")
    t_batch = torch.tensor([int(t)])
    out = denoiser(x_t.unsqueeze(0), c0.unsqueeze(0), t_batch).squeeze(0)
    if not torch.isfinite(out).all():
        raise FloatingPointError("denoiser produced non-finite values")
    return out


def parameter_count(denoiser: Denoiser) -> int:
    return sum(p.numel() for p in denoiser.parameters())


def save_checkpoint(denoiser: Denoiser, path) -> None:
    """Named-array container: magic line, JSON header (config + array
    index), then raw little-endian array bytes in header order."""
    state = denoiser.state_dict()
    index = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<")))
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "config": asdict(denoiser.config), "arrays": index},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        cfg_dict = dict(header["config"])
        cfg_dict["channel_multipliers"] = tuple(cfg_dict.get("channel_multipliers", ()))
        config = DenoiserConfig(**cfg_dict)
        model = init_denoiser(config)
        state = {}
        for spec in header["arrays"]:
            arr = np.frombuffer(
                f.read(int(np.dtype(spec["dtype"]).itemsize * int(np.prod(spec["shape"], dtype=np.int64)))),
                dtype=np.dtype(spec["dtype"]),
            ).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
