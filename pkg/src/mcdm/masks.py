"""Seedable free-form mask generation.

A mask is a binary (H, W) grid where 1 marks the region a generator is
allowed to repaint and 0 marks pixels that must survive untouched. Masks
are built from a random brush-stroke walk (filled circles connected by
thick lines) plus one random filled square, with rejection resampling to
keep the covered fraction inside configured bounds.

Rasterization uses an integer center-distance test (a cell belongs to a
circle/stroke iff its center lies within the radius), so outputs are
binary, anti-alias free, and reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from PIL import Image

MAX_COVERAGE_RETRIES = 100


class MaskGenerationError(RuntimeError):
    """Raised when no mask satisfying the coverage bounds was found."""


@dataclass
class Mask:
    """Binary region-to-regenerate grid."""

    grid: np.ndarray

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {self.grid.shape}")
        if not np.isin(self.grid, (0, 1)).all():
            raise ValueError("mask grid must contain only 0 and 1")
        self.grid = self.grid.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass
class MaskGenParams:
    """Knobs for the brush-walk generator.

    ``length`` is the brush-stroke step, the connecting-line thickness,
    and twice the endpoint circle radius. ``max_angle`` is clamped to
    (0, pi/2] so both walk increments stay non-negative and the walk is
    guaranteed to leave the image (the ``max_strokes`` cap backstops the
    max_angle = 0 edge where one axis never advances).
    """

    image_height: int
    image_width: int
    length: Optional[int] = None
    max_angle: float = math.pi / 2
    coverage_bounds: Tuple[float, float] = (0.05, 0.5)
    max_strokes: int = 256
    square_side_bounds: Tuple[float, float] = (0.125, 0.25)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.length is None:
            self.length = max(1, int(self.image_height) // 8)

    def validate(self) -> None:
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image dimensions must be positive")
        if not 0 < self.length < min(self.image_height, self.image_width):
            raise ValueError(
                f"length must be in (0, min(H, W)), got {self.length} "
                f"for {self.image_height}x{self.image_width}"
            )
        if not 0 <= self.max_angle <= math.pi / 2:
            raise ValueError(f"max_angle must be in [0, pi/2], got {self.max_angle}")
        low, high = self.coverage_bounds
        if not 0 <= low < high <= 1:
            raise ValueError(f"coverage_bounds must satisfy 0 <= low < high <= 1, got {self.coverage_bounds}")
        if self.max_strokes < 1:
            raise ValueError("max_strokes must be >= 1")
        slow, shigh = self.square_side_bounds
        if not 0 < slow <= shigh <= 1:
            raise ValueError(f"square_side_bounds must satisfy 0 < low <= high <= 1, got {self.square_side_bounds}")


def mask_coverage(mask: Mask) -> float:
    """Fraction of cells marked for regeneration."""
    return float(mask.grid.sum()) / (mask.height * mask.width)


def _fill_disk(grid: np.ndarray, cx: float, cy: float, radius: float) -> None:
    h, w = grid.shape
    i0 = max(0, int(math.floor(cx - radius)))
    i1 = min(h - 1, int(math.ceil(cx + radius)))
    j0 = max(0, int(math.floor(cy - radius)))
    j1 = min(w - 1, int(math.ceil(cy + radius)))
    if i0 > i1 or j0 > j1:
        return
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    inside = (ii - cx) ** 2 + (jj - cy) ** 2 <= radius**2
    grid[i0 : i1 + 1, j0 : j1 + 1][inside] = 1


def _fill_stroke(grid: np.ndarray, x1: float, y1: float, x2: float, y2: float, radius: float) -> None:
    """Thick line from (x1,y1) to (x2,y2): cells whose center is within
    ``radius`` of the segment (round caps included)."""
    h, w = grid.shape
    dx, dy = x2 - x1, y2 - y1
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        _fill_disk(grid, x1, y1, radius)
        return
    i0 = max(0, int(math.floor(min(x1, x2) - radius)))
    i1 = min(h - 1, int(math.ceil(max(x1, x2) + radius)))
    j0 = max(0, int(math.floor(min(y1, y2) - radius)))
    j1 = min(w - 1, int(math.ceil(max(y1, y2) + radius)))
    if i0 > i1 or j0 > j1:
        return
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    t = np.clip(((ii - x1) * dx + (jj - y1) * dy) / seg2, 0.0, 1.0)
    dist2 = (ii - (x1 + t * dx)) ** 2 + (jj - (y1 + t * dy)) ** 2
    grid[i0 : i1 + 1, j0 : j1 + 1][dist2 <= radius**2] = 1


def brush_stroke_walk(
    height: int,
    width: int,
    length: int,
    max_angle: float,
    rng: np.random.Generator,
    max_strokes: int = 256,
    start: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """Run the brush walk and return its binary grid (no square yet).

    Starting from a uniform random point (or ``start`` when given), draw a
    circle of radius length/2, step by ``length`` at an angle uniform in
    [0, max_angle], and connect old and new point with a line of thickness
    ``length``. Stops when the point leaves the image or after
    ``max_strokes`` strokes.
    """
    grid = np.zeros((height, width), dtype=np.uint8)
    if start is None:
        x = float(rng.uniform(0, height))
        y = float(rng.uniform(0, width))
    else:
        x, y = float(start[0]), float(start[1])
    radius = length / 2.0
    for _ in range(max_strokes):
        if not (0 <= x <= height and 0 <= y <= width):
            break
        _fill_disk(grid, x, y, radius)
        angle = float(rng.uniform(0, max_angle)) if max_angle > 0 else 0.0
        nx = x + length * math.sin(angle)
        ny = y + length * math.cos(angle)
        _fill_stroke(grid, x, y, nx, ny, radius)
        x, y = nx, ny
    return grid


def add_random_square(mask: Mask, side_bounds: Tuple[float, float], rng: np.random.Generator) -> Mask:
    """Union one axis-aligned filled square into the mask.

    The side is uniform in side_bounds * min(H, W); the position uniform
    over placements fully inside the image. Never clears cells.
    """
    low, high = side_bounds
    if not 0 < low <= high <= 1:
        raise ValueError(f"square_side_bounds must satisfy 0 < low <= high <= 1, got {side_bounds}")
    h, w = mask.height, mask.width
    side = max(1, int(round(float(rng.uniform(low, high)) * min(h, w))))
    if side > min(h, w):
        raise ValueError(f"square side {side} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    grid = mask.grid.copy()
    grid[top : top + side, left : left + side] = 1
    return Mask(grid)


def _attempt_rng(seed: int, attempt: int) -> np.random.Generator:
    # One independent, platform-stable stream per rejection-retry attempt.
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(attempt,)))


def generate_random_mask(params: MaskGenParams) -> Mask:
    """Generate one mask; resample (new derived seed) until coverage lands
    strictly inside ``coverage_bounds``; fail after 100 rejected attempts."""
    params.validate()
    low, high = params.coverage_bounds
    last_coverage = None
    for attempt in range(MAX_COVERAGE_RETRIES):
        rng = _attempt_rng(params.seed, attempt)
        grid = brush_stroke_walk(
            params.image_height,
            params.image_width,
            params.length,
            params.max_angle,
            rng,
            max_strokes=params.max_strokes,
        )
        mask = add_random_square(Mask(grid), params.square_side_bounds, rng)
        last_coverage = mask_coverage(mask)
        if low < last_coverage < high:
            return mask
    bound = f"low bound {low}" if last_coverage <= low else f"high bound {high}"
    raise MaskGenerationError(
        f"coverage {last_coverage:.4f} violates {bound} after {MAX_COVERAGE_RETRIES} attempts (seed={params.seed})"
    )


def save_mask(mask: Mask, path) -> None:
    """Write a mask as a single-channel lossless image (0 -> 0, 1 -> 255)."""
    Image.fromarray(mask.grid * np.uint8(255), mode="L").save(path)


def load_mask(path) -> Mask:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"mask file must be single-channel: {path}")
    if not np.isin(arr, (0, 255)).all():
        raise ValueError(f"mask file contains values other than 0/255: {path}")
    return Mask((arr == 255).astype(np.uint8))


RLE_HEADER = "mcdm-mask-rle-v1"


def mask_to_rle(mask: Mask) -> str:
    """Compact run-length text: header line, then run lengths of the
    row-major flattened grid, alternating values starting with 0."""
    flat = mask.grid.reshape(-1)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], boundaries, [flat.size])))
    if flat[0] == 1:  # leading zero-run of length 0 keeps the alternation convention
        runs = np.concatenate(([0], runs))
    body = " ".join(str(int(r)) for r in runs)
    return f"{RLE_HEADER} {mask.height} {mask.width}\n{body}\n"


def mask_from_rle(text: str) -> Mask:
    lines = text.strip().splitlines()
    if not lines:
        raise ValueError("empty RLE text")
    header = lines[0].split()
    if len(header) != 3 or header[0] != RLE_HEADER:
        raise ValueError(f"bad RLE header: {lines[0]!r}")
    height, width = int(header[1]), int(header[2])
    runs = [int(tok) for tok in " ".join(lines[1:]).split()]
    if sum(runs) != height * width:
        raise ValueError("RLE runs do not cover the grid")
    flat = np.zeros(height * width, dtype=np.uint8)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return Mask(flat.reshape(height, width))
