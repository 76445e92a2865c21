"""Run configuration: defaults, TOML files, dotted overrides, seeds.

One effective config drives every command. Precedence is
command-line ``--set`` > config file > built-in defaults, resolved per
field; ``--seed`` replaces global_seed last. Every per-stage seed is
derived from global_seed, so one integer pins the whole run.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import tomli

from .diffusion import NoiseSchedule, make_schedule
from .features import EXTRACTOR_KINDS
from .losses import TrainingConfig
from .masks import MaskGenParams
from .model import DenoiserConfig
from .seeding import derive_seed

OUT_DIR_ENV = "MCDM_OUT_DIR"
SCHEDULE_KINDS = ("linear", "cosine")

# key -> coercion tag; doubles as the full set of legal config keys
_SCHEMA = {
    "image_size": "int",
    "global_seed": "int",
    "schedule.T": "int",
    "schedule.kind": "str",
    "schedule.beta_min": "float",
    "schedule.beta_max": "float",
    "model.image_channels": "int",
    "model.base_width": "int",
    "model.depth": "int",
    "model.time_embed_dim": "int",
    "model.channel_multipliers": "int_list",
    "training.lambda1": "float",
    "training.lambda2": "float",
    "training.learning_rate": "float",
    "training.batch_size": "int",
    "training.epochs": "int",
    "mask.length": "int",
    "mask.max_angle": "float",
    "mask.coverage_bounds": "float_pair",
    "mask.max_strokes": "int",
    "mask.square_side_bounds": "float_pair",
    "extractor.kind": "str",
    "extractor.dim": "int",
    "extractor.checkpoint": "str",
    "paths.data_dir": "str",
    "paths.out_dir": "str",
    "paths.checkpoint": "str",
}

# mask.length 0 means "derive from image size"; paths.out_dir "" falls
# back to $MCDM_OUT_DIR, then to "out"
_DEFAULTS = {
    "image_size": 256,
    "global_seed": 0,
    "schedule.T": 1000,
    "schedule.kind": "linear",
    "schedule.beta_min": 1e-4,
    "schedule.beta_max": 0.02,
    "model.image_channels": 3,
    "model.base_width": 32,
    "model.depth": 3,
    "model.time_embed_dim": 128,
    "model.channel_multipliers": (),
    "training.lambda1": 1.0,
    "training.lambda2": 0.001,
    "training.learning_rate": 5e-5,
    "training.batch_size": 8,
    "training.epochs": 50,
    "mask.length": 0,
    "mask.max_angle": math.pi / 2,
    "mask.coverage_bounds": (0.05, 0.5),
    "mask.max_strokes": 256,
    "mask.square_side_bounds": (0.125, 0.25),
    "extractor.kind": "toy-random-projection",
    "extractor.dim": 256,
    "extractor.checkpoint": "",
    "paths.data_dir": "data",
    "paths.out_dir": "",
    "paths.checkpoint": "",
}

_SECTION_ORDER = ("schedule", "model", "training", "mask", "extractor", "paths")


class ConfigError(ValueError):
    """A config value violates its contract; carries the dotted field name."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class ExtractorConfig:
    kind: str = "toy-random-projection"
    dim: int = 256
    seed: int = 0
    checkpoint: str = ""

    def validate(self) -> None:
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"kind must be one of {EXTRACTOR_KINDS}, got {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind != "toy-random-projection" and not self.checkpoint:
            raise ValueError(f"checkpoint path required for kind {self.kind!r}")


@dataclass
class ScheduleConfig:
    T: int = 1000
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def make(self) -> NoiseSchedule:
        return make_schedule(self.T, kind=self.kind, beta_min=self.beta_min, beta_max=self.beta_max)


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = ""


@dataclass
class RunConfig:
    image_size: int
    global_seed: int
    schedule: ScheduleConfig
    model: DenoiserConfig
    training: TrainingConfig
    mask: MaskGenParams
    extractor: ExtractorConfig
    paths: PathsConfig
    tree: Dict[str, object]

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.global_seed, stage)


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage RNG seed, a pure function of (global_seed, stage name)."""
    return derive_seed(global_seed, "stage", stage)


def _coerce_string(key: str, raw: str):
    tag = _SCHEMA[key]
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "str":
            return raw
        if tag == "int_list":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) for p in parts)
        if tag == "float_pair":
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError("expected exactly two comma-separated values")
            return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r} as {tag}: {exc}") from exc
    raise ConfigError(key, f"unhandled schema tag {tag}")


def _coerce_typed(key: str, value):
    tag = _SCHEMA[key]
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if tag == "int_list":
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if tag == "float_pair":
        if (
            not isinstance(value, (list, tuple))
            or len(value) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)
        ):
            raise ConfigError(key, f"expected a pair of numbers, got {value!r}")
        return (float(value[0]), float(value[1]))
    raise ConfigError(key, f"unhandled schema tag {tag}")


def _flatten(tree: Mapping, prefix: str = "") -> Dict[str, object]:
    flat: Dict[str, object] = {}
    for name, value in tree.items():
        key = f"{prefix}{name}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{key}."))
        else:
            flat[key] = value
    return flat


def load_config_file(path) -> Dict[str, object]:
    """Parse a TOML config file into validated {dotted key: value}."""
    try:
        with open(path, "rb") as fh:
            tree = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML: {exc}") from exc
    flat = _flatten(tree)
    values = {}
    for key, value in flat.items():
        if key not in _SCHEMA:
            raise ConfigError(key, "unknown config key")
        values[key] = _coerce_typed(key, value)
    return values


def parse_override(spec: str) -> Tuple[str, object]:
    """Parse one ``key=value`` override into a (key, coerced value) pair."""
    key, sep, raw = spec.partition("=")
    key = key.strip()
    if not sep:
        raise ConfigError(spec, "override must look like key=value")
    if key not in _SCHEMA:
        raise ConfigError(key, "unknown config key")
    return key, _coerce_string(key, raw.strip())


def resolve_config(
    file_values: Optional[Mapping[str, object]] = None,
    overrides: Sequence[Tuple[str, object]] = (),
    seed: Optional[int] = None,
    env: Optional[Mapping[str, str]] = None,
) -> Dict[str, object]:
    """Apply defaults < file < --set overrides < --seed; returns flat values."""
    values = dict(_DEFAULTS)
    if file_values:
        values.update(file_values)
    for key, value in overrides:
        if key not in _SCHEMA:
            raise ConfigError(key, "unknown config key")
        values[key] = value
    if seed is not None:
        values["global_seed"] = int(seed)
    if not values["paths.out_dir"]:
        env = os.environ if env is None else env
        values["paths.out_dir"] = env.get(OUT_DIR_ENV, "") or "out"
    return values


def build_run_config(values: Mapping[str, object]) -> RunConfig:
    """Turn resolved flat values into validated sub-configs."""
    image_size = values["image_size"]
    if image_size < 1:
        raise ConfigError("image_size", "must be >= 1")
    global_seed = values["global_seed"]

    schedule = ScheduleConfig(
        T=values["schedule.T"],
        kind=values["schedule.kind"],
        beta_min=values["schedule.beta_min"],
        beta_max=values["schedule.beta_max"],
    )
    if schedule.kind not in SCHEDULE_KINDS:
        raise ConfigError("schedule.kind", f"must be one of {SCHEDULE_KINDS}")
    try:
        schedule.make()
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from exc

    model = DenoiserConfig(
        image_channels=values["model.image_channels"],
        base_width=values["model.base_width"],
        depth=values["model.depth"],
        time_embed_dim=values["model.time_embed_dim"],
        channel_multipliers=tuple(values["model.channel_multipliers"]),
        seed=stage_seed(global_seed, "model"),
    )
    try:
        model.validate()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from exc
    if image_size % (2 ** (model.depth - 1)) != 0:
        raise ConfigError(
            "model.depth", f"image_size {image_size} not divisible by {2 ** (model.depth - 1)}"
        )

    training = TrainingConfig(
        lambda1=values["training.lambda1"],
        lambda2=values["training.lambda2"],
        learning_rate=values["training.learning_rate"],
        batch_size=values["training.batch_size"],
        epochs=values["training.epochs"],
        seed=stage_seed(global_seed, "training"),
    )
    try:
        training.validate()
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from exc

    mask = MaskGenParams(
        image_height=image_size,
        image_width=image_size,
        length=values["mask.length"] or None,
        max_angle=values["mask.max_angle"],
        coverage_bounds=tuple(values["mask.coverage_bounds"]),
        max_strokes=values["mask.max_strokes"],
        square_side_bounds=tuple(values["mask.square_side_bounds"]),
        seed=stage_seed(global_seed, "mask"),
    )
    try:
        mask.validate()
    except ValueError as exc:
        raise ConfigError("mask", str(exc)) from exc

    extractor = ExtractorConfig(
        kind=values["extractor.kind"],
        dim=values["extractor.dim"],
        seed=stage_seed(global_seed, "extractor"),
        checkpoint=values["extractor.checkpoint"],
    )
    try:
        extractor.validate()
    except ValueError as exc:
        raise ConfigError("extractor", str(exc)) from exc

    paths = PathsConfig(
        data_dir=values["paths.data_dir"],
        out_dir=values["paths.out_dir"],
        checkpoint=values["paths.checkpoint"],
    )

    tree: Dict[str, object] = {}
    for key in _SCHEMA:
        section, _, name = key.partition(".")
        if name:
            tree.setdefault(section, {})[name] = values[key]
        else:
            tree[key] = values[key]

    return RunConfig(
        image_size=image_size,
        global_seed=global_seed,
        schedule=schedule,
        model=model,
        training=training,
        mask=mask,
        extractor=extractor,
        paths=paths,
        tree=tree,
    )


def _format_toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot encode {value!r} as TOML")


def format_toml(tree: Mapping[str, object]) -> str:
    """Serialize a two-level config tree to TOML, deterministically."""
    lines: List[str] = []
    for key, value in tree.items():
        if not isinstance(value, Mapping):
            lines.append(f"{key} = {_format_toml_value(value)}")
    for section in _SECTION_ORDER:
        body = tree.get(section)
        if not isinstance(body, Mapping):
            continue
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in body.items():
            lines.append(f"{key} = {_format_toml_value(value)}")
    return "\n".join(lines) + "\n"


def write_effective_config(config: RunConfig, out_dir) -> Path:
    """Freeze the resolved config next to the run's artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective-config.toml"
    path.write_text(format_toml(config.tree), encoding="utf-8")
    return path
