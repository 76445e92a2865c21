"""Command-line entry point wiring the modules into reproducible runs.

Every command resolves one effective config (defaults < --config file <
--set overrides, --seed last), freezes it into out_dir, then runs. Exit
codes: 0 success, 1 runtime failure, 2 config violation; failures print
one ``error: <category>: <detail>`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_config_file,
    parse_override,
    resolve_config,
    write_effective_config,
)
from .datapipe import ManifestEntry, load_image, read_manifest, write_augmented, write_manifest
from .diffusion import sample, schedule_csv
from .evalmetrics import (
    FeatureSet,
    ScoredLabels,
    auc,
    fid,
    format_report,
    format_report_csv,
    outside_mask_error,
)
from .features import extract, make_extractor
from .losses import BatchItem, train_step
from .masks import generate_random_mask, mask_coverage, save_mask
from .model import init_denoiser, load_checkpoint, save_checkpoint
from .seeding import derive_seed

COMMANDS = ("gen-masks", "train", "sample", "augment", "eval-fid", "eval-auc", "inspect-schedule")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdm",
        description="Masked conditional diffusion augmentation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="replace global_seed")
        return p

    p = add("gen-masks", "generate free-form masks plus coverage stats")
    p.add_argument("--count", type=int, default=16, help="number of masks")

    p = add("train", "train the mask-conditioned denoiser on real frames")
    p.add_argument("--manifest", default=None, help="training manifest (JSONL)")

    p = add("sample", "inpaint a few manifest entries with a trained model")
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--count", type=int, default=1, help="number of source entries")

    p = add("augment", "inpaint every real train entry and extend the manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)

    p = add("eval-fid", "Fréchet distance between real and fake feature sets")
    p.add_argument("--manifest", default=None)

    p = add("eval-auc", "rank AUC from a score/label table")
    p.add_argument("--scores", required=True, help="CSV or JSONL with score,label")

    add("inspect-schedule", "emit the noise schedule as CSV")
    return parser


def _resolve(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else None
    overrides = [parse_override(spec) for spec in args.overrides]
    values = resolve_config(file_values, overrides, seed=args.seed)
    return build_run_config(values)


def _make_run_extractor(config: RunConfig):
    return make_extractor(
        config.extractor.kind,
        image_size=config.image_size,
        image_channels=config.model.image_channels,
        dim=config.extractor.dim,
        seed=config.extractor.seed,
        checkpoint=config.extractor.checkpoint or None,
    )


def _manifest_path(config: RunConfig, flag: Optional[str], default_dir: str) -> Path:
    if flag:
        return Path(flag)
    base = config.paths.data_dir if default_dir == "data" else config.paths.out_dir
    return Path(base) / "manifest.jsonl"


def _load_trained(config: RunConfig, flag: Optional[str]):
    path = flag or config.paths.checkpoint
    if not path:
        raise ConfigError("paths.checkpoint", "required for this command")
    blob = Path(path).read_bytes()
    run_id = hashlib.sha256(blob).hexdigest()[:16]
    denoiser = load_checkpoint(path)
    return denoiser, run_id


def _write_report(out_dir: Path, name: str, metrics: dict) -> None:
    (out_dir / f"{name}.json").write_text(format_report(metrics), encoding="utf-8")
    (out_dir / f"{name}.csv").write_text(format_report_csv(metrics), encoding="utf-8")


def _cmd_gen_masks(config: RunConfig, args, out_dir: Path) -> int:
    if args.count < 1:
        raise ConfigError("count", "must be >= 1")
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.count):
        seed_i = derive_seed(config.mask.seed, "mask", i)
        mask = generate_random_mask(replace(config.mask, seed=seed_i))
        name = f"mask_{i:05d}.png"
        save_mask(mask, masks_dir / name)
        records.append(
            {"index": i, "seed": seed_i, "coverage": mask_coverage(mask), "path": f"masks/{name}"}
        )
    coverages = [r["coverage"] for r in records]
    stats = {
        "count": len(records),
        "coverage_mean": sum(coverages) / len(coverages),
        "coverage_min": min(coverages),
        "coverage_max": max(coverages),
        "masks": records,
    }
    (out_dir / "mask-stats.json").write_text(json.dumps(stats, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {args.count} masks to {masks_dir} (stats in mask-stats.json)")
    return 0


def _cmd_inspect_schedule(config: RunConfig, args, out_dir: Path) -> int:
    schedule = config.schedule.make()
    path = out_dir / "schedule.csv"
    path.write_text(schedule_csv(schedule), encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _train_entries(path: Path) -> List[ManifestEntry]:
    entries = [e for e in read_manifest(path) if e.split == "train" and e.label == "real"]
    if not entries:
        raise RuntimeError(f"no real train entries in {path}")
    return entries


def _cmd_train(config: RunConfig, args, out_dir: Path) -> int:
    manifest = _manifest_path(config, args.manifest, "data")
    entries = _train_entries(manifest)
    schedule = config.schedule.make()
    denoiser = init_denoiser(config.model)
    denoiser.train()
    extractor = _make_run_extractor(config)
    optimizer = torch.optim.Adam(
        denoiser.parameters(), lr=config.training.learning_rate, betas=(0.9, 0.999)
    )
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    images = {e.path: load_image(e.path, config.image_size) for e in entries}

    step = 0
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as metrics_file:
        for epoch in range(config.training.epochs):
            order_rng = np.random.default_rng(derive_seed(config.training.seed, "order", epoch))
            order = order_rng.permutation(len(entries))
            epoch_losses = []
            for start in range(0, len(order), config.training.batch_size):
                chunk = order[start : start + config.training.batch_size]
                batch = []
                for idx in chunk:
                    entry = entries[int(idx)]
                    mask_seed = derive_seed(config.mask.seed, "train-mask", epoch, entry.path)
                    mask = generate_random_mask(replace(config.mask, seed=mask_seed))
                    item_seed = derive_seed(config.training.seed, "item", epoch, entry.path)
                    batch.append(BatchItem(x0=images[entry.path], mask=mask, seed=item_seed))
                t_start = time.perf_counter()
                stats = train_step(denoiser, batch, schedule, extractor, config.training, optimizer)
                stats.update(
                    step=step,
                    epoch=epoch,
                    lr=config.training.learning_rate,
                    wallclock_ms=(time.perf_counter() - t_start) * 1000.0,
                )
                metrics_file.write(json.dumps(stats, sort_keys=True) + "\n")
                epoch_losses.append(stats["loss"])
                step += 1
            save_checkpoint(denoiser, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
            print(f"epoch {epoch}: mean loss {sum(epoch_losses) / len(epoch_losses):.6f}")

    final = out_dir / "checkpoint.ckpt"
    save_checkpoint(denoiser, final)
    print(f"wrote {final}")
    return 0


def _generate(config: RunConfig, args, out_dir: Path, limit: Optional[int]) -> int:
    manifest = _manifest_path(config, args.manifest, "data")
    entries = read_manifest(manifest)
    sources = [e for e in entries if e.split == "train" and e.label == "real"]
    if not sources:
        raise RuntimeError(f"no real train entries in {manifest}")
    if limit is not None:
        sources = sources[:limit]
    denoiser, run_id = _load_trained(config, args.checkpoint)
    schedule = config.schedule.make()
    aug_seed = config.stage_seed("augment")

    generated = []
    worst_outside = 0.0
    for entry in sources:
        x0 = load_image(entry.path, config.image_size)
        mask_seed = derive_seed(aug_seed, "mask", entry.path)
        mask = generate_random_mask(replace(config.mask, seed=mask_seed))
        sample_seed = derive_seed(aug_seed, "sample", entry.path)
        image = sample(denoiser, x0, mask, schedule, sample_seed)
        new_entry = write_augmented(
            entry, image, mask, out_dir, mask_seed=mask_seed, generator_run=run_id
        )
        reloaded = load_image(new_entry.path, config.image_size)
        worst_outside = max(worst_outside, outside_mask_error(x0, reloaded, mask))
        generated.append(new_entry)

    extended = entries + generated
    out_manifest = out_dir / "manifest.jsonl"
    write_manifest(extended, out_manifest)
    report = {
        "fid": None,
        "auc": None,
        "outside_mask_error": worst_outside,
        "n_samples": len(generated),
        "n_source_entries": len(entries),
        "generator_run": run_id,
    }
    _write_report(out_dir, "augment-report", report)
    print(f"generated {len(generated)} images; extended manifest at {out_manifest}")
    return 0


def _cmd_sample(config: RunConfig, args, out_dir: Path) -> int:
    return _generate(config, args, out_dir, limit=args.count)


def _cmd_augment(config: RunConfig, args, out_dir: Path) -> int:
    return _generate(config, args, out_dir, limit=None)


def _feature_matrix(config: RunConfig, extractor, entries: Sequence[ManifestEntry]) -> np.ndarray:
    rows = []
    for start in range(0, len(entries), 64):
        batch = torch.stack(
            [load_image(e.path, config.image_size) for e in entries[start : start + 64]]
        )
        rows.append(extract(extractor, batch).numpy())
    return np.concatenate(rows, axis=0)


def _cmd_eval_fid(config: RunConfig, args, out_dir: Path) -> int:
    manifest = _manifest_path(config, args.manifest, "out")
    entries = read_manifest(manifest)
    real = [e for e in entries if e.label == "real"]
    fake = [e for e in entries if e.label == "fake"]
    if len(real) < 2 or len(fake) < 2:
        raise RuntimeError(
            f"need >= 2 real and >= 2 fake entries, got {len(real)} real / {len(fake)} fake"
        )
    extractor = _make_run_extractor(config)
    set_real = FeatureSet(_feature_matrix(config, extractor, real))
    set_fake = FeatureSet(_feature_matrix(config, extractor, fake))
    value = fid(set_real, set_fake)
    report = {
        "fid": value,
        "auc": None,
        "outside_mask_error": None,
        "n_samples": len(real) + len(fake),
        "n_real": len(real),
        "n_fake": len(fake),
    }
    _write_report(out_dir, "fid-report", report)
    print(f"fid {value:.6f} over {len(real)} real / {len(fake)} fake")
    return 0


def _read_scores(path: Path) -> ScoredLabels:
    scores, labels = [], []
    if path.suffix == ".jsonl":
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                scores.append(float(row["score"]))
                labels.append(int(row["label"]))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                scores.append(float(row["score"]))
                labels.append(int(row["label"]))
    if not scores:
        raise ValueError(f"no score rows in {path}")
    return ScoredLabels(np.array(scores), np.array(labels))


def _cmd_eval_auc(config: RunConfig, args, out_dir: Path) -> int:
    data = _read_scores(Path(args.scores))
    value = auc(data)
    report = {
        "auc": value,
        "fid": None,
        "outside_mask_error": None,
        "n_samples": int(data.scores.size),
    }
    _write_report(out_dir, "auc-report", report)
    print(f"auc {value:.6f} over {data.scores.size} rows")
    return 0


_HANDLERS = {
    "gen-masks": _cmd_gen_masks,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "augment": _cmd_augment,
    "eval-fid": _cmd_eval_fid,
    "eval-auc": _cmd_eval_auc,
    "inspect-schedule": _cmd_inspect_schedule,
}


def _fail(category: str, exc: BaseException) -> None:
    detail = " ".join(str(exc).split())
    print(f"error: {category}: {detail}", file=sys.stderr)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _resolve(args)
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    out_dir = Path(config.paths.out_dir)
    try:
        write_effective_config(config, out_dir)
        return _HANDLERS[args.command](config, args, out_dir)
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        _fail(type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
