"""Dataset manifests, frame sampling, and image IO.

A manifest is a JSONL file, one entry per image. Entries carry enough
provenance (source video, manipulation method, split) to rebuild any
train/eval subset deterministically, and augmented entries additionally
record the mask seed and generator run that produced them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .masks import Mask, save_mask
from .seeding import derive_seed

LABELS = ("real", "fake")
METHODS = ("original", "DF", "F2F", "FS", "NT", "mcdm", "other")
SPLITS = ("train", "val", "test")


class InsufficientFramesError(ValueError):
    """A source group has fewer frames than the sampling plan requires."""


@dataclass
class ManifestEntry:
    path: str
    label: str
    source_id: str
    method: str
    split: str
    mask_seed: Optional[int] = None
    generator_run: Optional[str] = None

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.path:
            raise ValueError("path must be non-empty")
        if not self.source_id:
            raise ValueError("source_id must be non-empty")
        if self.label == "fake" and self.method == "original":
            raise ValueError(f"fake entry {self.path} cannot have method 'original'")
        if self.method == "mcdm" and (self.mask_seed is None or self.generator_run is None):
            raise ValueError(f"mcdm entry {self.path} needs mask_seed and generator_run")

    def to_json_line(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "ManifestEntry":
        return cls(**json.loads(line))


@dataclass
class SamplingPlan:
    frames_per_fake_video: int = 4
    frames_per_real_video: int = 8
    frames_per_test_video: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("frames_per_fake_video", "frames_per_real_video", "frames_per_test_video"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def frames_for(self, label: str, split: str) -> int:
        if split == "test":
            return self.frames_per_test_video
        return self.frames_per_real_video if label == "real" else self.frames_per_fake_video


@dataclass
class SourceGroup:
    """All candidate frames extracted from one source video."""

    source_id: str
    label: str
    frames: Sequence[str]
    method: Optional[str] = None
    split: str = "train"

    def __post_init__(self) -> None:
        if self.method is None:
            self.method = "original" if self.label == "real" else "other"


def build_training_manifest(groups: Iterable[SourceGroup], plan: SamplingPlan) -> List[ManifestEntry]:
    """Sample frames per group without replacement, deterministically in plan.seed."""
    entries: List[ManifestEntry] = []
    seen = set()
    for group in groups:
        want = plan.frames_for(group.label, group.split)
        if len(group.frames) < want:
            raise InsufficientFramesError(
                f"group {group.source_id!r} has {len(group.frames)} frames, plan wants {want}"
            )
        rng = np.random.default_rng(derive_seed(plan.seed, "frames", group.source_id))
        picks = rng.choice(len(group.frames), size=want, replace=False)
        for i in sorted(int(p) for p in picks):
            entry = ManifestEntry(
                path=str(group.frames[i]),
                label=group.label,
                source_id=group.source_id,
                method=group.method,
                split=group.split,
            )
            if entry.path in seen:
                raise ValueError(f"duplicate path in manifest: {entry.path}")
            seen.add(entry.path)
            entries.append(entry)
    return entries


def load_image(path, target_size: int) -> torch.Tensor:
    """Read an RGB image, bilinear-resize to target_size, scale to [-1, 1].

    Returns a float32 (3, target_size, target_size) tensor.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                raise ValueError(f"expected an RGB image, got mode {mode!r}: {path}")
            resized = im.resize((target_size, target_size), Image.BILINEAR)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(resized, dtype=np.float32)
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def save_image(image: torch.Tensor, path) -> None:
    """Quantize a (3, H, W) [-1, 1] tensor to 8-bit RGB and write a PNG."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) tensor, got shape {tuple(image.shape)}")
    arr = image.detach().cpu().numpy()
    arr = np.clip(arr, -1.0, 1.0)
    quantized = np.rint((arr + 1.0) * 127.5).astype(np.uint8)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_augmented(
    entry: ManifestEntry,
    image: torch.Tensor,
    mask: Mask,
    out_dir,
    mask_seed: int,
    generator_run: str,
) -> ManifestEntry:
    """Persist one generated image plus its mask, return the manifest entry.

    The image lands in out_dir/images and the mask in out_dir/masks, both
    lossless PNG; the returned entry is labeled fake with method mcdm.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{entry.source_id}__{Path(entry.path).stem}__mcdm"
    image_path = images_dir / f"{stem}.png"
    mask_path = masks_dir / f"{stem}_mask.png"
    save_image(image, image_path)
    save_mask(mask, mask_path)
    return ManifestEntry(
        path=str(image_path),
        label="fake",
        source_id=entry.source_id,
        method="mcdm",
        split=entry.split,
        mask_seed=mask_seed,
        generator_run=generator_run,
    )


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    text = "".join(e.to_json_line() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(ManifestEntry.from_json_line(line))
    return entries
