"""Command-line entry points for the toolkit.

Five subcommands tie the modules together:

* ``synth-gen`` — render a synthetic corpus to the on-disk dataset layout,
* ``train``    — fit a model from a config document, writing checkpoints and
  a metrics log,
* ``eval``     — score a checkpoint on a dataset's held-out split and append
  one results-CSV row,
* ``ablate``   — train/evaluate the {full, w/o FD, w/o SPM, w/o PL} grid over
  strong fractions and seeds,
* ``overlay``  — render test images with ground-truth contours in blue and
  predicted contours in red.

Every run is described by one structured config document (YAML, of which JSON
is a subset); a ``manifest.json`` recording command, config, seed, revision,
and timestamps is written into the output directory before work begins.  Given
identical config and seed, reruns produce byte-identical artifacts except for
the manifest timestamps.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .data import Sample, SynthConfig, load_dataset, save_dataset, synthesize_dataset
from .metrics import (RESULTS_HEADER, evaluate_dataset, format_result_row,
                      predict_probability)
from .network import NetConfig
from .training import (TrainConfig, build_model, config_from_dict, fit,
                       load_checkpoint, make_splits)

ABLATION_VARIANTS = (
    ("Ours", dict()),
    ("Ours (w/o FD)", dict(ablate_fd=True)),
    ("Ours (w/o SPM)", dict(ablate_spm=True)),
    ("Ours (w/o PL)", dict(ablate_pl=True)),
)

ABLATE_HEADER = "method,strong_pct,weak_pct,dataset,seed,dice,sm"

GT_COLOR = (0, 0, 255)      # ground-truth contour: blue
PRED_COLOR = (255, 0, 0)    # predicted contour: red


# ---------------------------------------------------------------------------
# Run manifests


@dataclass
class RunManifest:
    """Provenance record written into every output directory."""

    command: str
    config_path: str
    output_dir: str
    start: str
    end: Optional[str]
    revision: str
    seed: int


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _revision() -> str:
    """Source revision: git commit when available, else the package version."""
    try:
        proc = subprocess.run(["git", "rev-parse", "HEAD"],
                              cwd=Path(__file__).resolve().parent,
                              capture_output=True, text=True, timeout=10)
        if proc.returncode == 0:
            return proc.stdout.strip()
    except OSError:
        pass
    return f"hybridseg-{__version__}"


def write_manifest(manifest: RunManifest, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(dataclasses.asdict(manifest), f, indent=2, sort_keys=True)
        f.write("\n")


def _start_manifest(command: str, config_path: str, out_dir: Path,
                    seed: int) -> RunManifest:
    """Record the run before any artifact is produced."""
    manifest = RunManifest(command=command, config_path=str(config_path),
                           output_dir=str(out_dir), start=_now(), end=None,
                           revision=_revision(), seed=seed)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _finish_manifest(manifest: RunManifest, out_dir: Path) -> None:
    write_manifest(replace(manifest, end=_now()), out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# Config documents


def _load_config_doc(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"config file not found: {p}")
    with open(p) as f:
        doc = yaml.safe_load(f)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"config root must be a key-value mapping: {p}")
    return doc


def _check_fields(doc: dict, cls, context: str) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ValueError(f"unknown {context} field(s): {', '.join(unknown)}")


def parse_synth_config(doc: dict) -> SynthConfig:
    doc = dict(doc)
    _check_fields(doc, SynthConfig, "synth config")
    if "mass_radius_range" in doc:
        doc["mass_radius_range"] = tuple(doc["mass_radius_range"])
    return SynthConfig(**doc)


def parse_train_config(doc: dict) -> tuple[TrainConfig, Optional[str]]:
    """Split a train document into (TrainConfig, dataset path or None)."""
    doc = dict(doc)
    dataset = doc.pop("dataset", None)
    _check_fields(doc, TrainConfig, "train config")
    net = doc.get("net")
    if isinstance(net, dict):
        _check_fields(net, NetConfig, "net config")
    return config_from_dict(doc), dataset


def _load_samples(dataset_dir: str | Path) -> list[Sample]:
    root = Path(dataset_dir)
    if not (root / "images").is_dir():
        raise ValueError(f"dataset not found (no images/ under {root})")
    samples = load_dataset(root)
    if not samples:
        raise ValueError(f"dataset at {root} contains no samples")
    return samples


def _resolve_dataset(flag: Optional[str], from_config: Optional[str]) -> str:
    dataset = flag or from_config
    if dataset is None:
        raise ValueError("no dataset given: pass --dataset or set 'dataset' "
                         "in the config")
    return dataset


def method_name(cfg: TrainConfig) -> str:
    """Results-row label for a training configuration."""
    if cfg.mode == "ours":
        off = [name for flag, name in ((cfg.ablate_fd, "FD"),
                                       (cfg.ablate_spm, "SPM"),
                                       (cfg.ablate_pl, "PL")) if flag]
        return f"Ours (w/o {'/'.join(off)})" if off else "Ours"
    return {"strong_only": "Strong-Only", "weak_only": "Weak-Only",
            "vanilla_hybrid": "Vanilla-Hybrid"}[cfg.mode]


def _result_row(cfg: TrainConfig, dataset_name: str, mean_dice: float,
                mean_sm: float) -> str:
    strong_pct = cfg.strong_fraction * 100.0
    return format_result_row(method_name(cfg), strong_pct, 100.0 - strong_pct,
                             dataset_name, mean_dice, mean_sm)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth_gen(config: str, out: str, seed: Optional[int]) -> int:
    scfg = parse_synth_config(_load_config_doc(config))
    if seed is not None:
        scfg = replace(scfg, seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest("synth-gen", config, out_dir, scfg.seed)
    save_dataset(synthesize_dataset(scfg), out_dir, synth_config=scfg)
    _finish_manifest(manifest, out_dir)
    return 0


def cmd_train(config: str, out: str, dataset: Optional[str],
              seed: Optional[int], checkpoint: Optional[str]) -> int:
    cfg, cfg_dataset = parse_train_config(_load_config_doc(config))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    samples = _load_samples(_resolve_dataset(dataset, cfg_dataset))
    split = make_splits(samples, cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest("train", config, out_dir, cfg.seed)
    _, log = fit(split, cfg, checkpoint_dir=out_dir / "checkpoints",
                 resume_from=checkpoint)
    with open(out_dir / "metrics.csv", "a" if checkpoint else "w") as f:
        f.writelines(line + "\n" for line in log)
    _finish_manifest(manifest, out_dir)
    return 0


def cmd_eval(checkpoint: str, dataset: str, out: str,
             seed: Optional[int]) -> int:
    if not Path(checkpoint).is_file():
        raise ValueError(f"checkpoint not found: {checkpoint}")
    record = load_checkpoint(checkpoint)
    cfg = record.config
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    samples = _load_samples(dataset)
    split = make_splits(samples, cfg)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = out_path.with_suffix(".manifest.json")
    manifest = RunManifest(command="eval", config_path=str(checkpoint),
                           output_dir=str(out_path.parent), start=_now(),
                           end=None, revision=_revision(), seed=cfg.seed)
    write_manifest(manifest, manifest_path)
    model = build_model(cfg)
    model.load_state_dict(record.parameters)
    report = evaluate_dataset(model, split.test, resolution=cfg.resolution)
    row = _result_row(cfg, Path(dataset).name, report.mean_dice, report.mean_sm)
    new_file = not out_path.exists()
    with open(out_path, "a") as f:
        if new_file:
            f.write(RESULTS_HEADER + "\n")
        f.write(row + "\n")
    write_manifest(replace(manifest, end=_now()), manifest_path)
    print(row)
    return 0


def cmd_ablate(config: str, out: str, dataset: Optional[str],
               seed: Optional[int]) -> int:
    doc = _load_config_doc(config)
    fractions = doc.pop("fractions", None)
    seeds = doc.pop("seeds", None)
    cfg, cfg_dataset = parse_train_config(doc)
    fractions = [float(f) for f in (fractions if fractions is not None
                                    else [cfg.strong_fraction])]
    seeds = [int(s) for s in (seeds if seeds is not None else [cfg.seed])]
    if seed is not None:
        seeds = [seed]
    if not fractions or not seeds:
        raise ValueError("'fractions' and 'seeds' must be non-empty lists")
    dataset_dir = _resolve_dataset(dataset, cfg_dataset)
    samples = _load_samples(dataset_dir)
    dataset_name = Path(dataset_dir).name
    # Validate every grid cell before any training starts.
    grid = [replace(cfg, mode="ours", strong_fraction=fraction, seed=s,
                    ablate_fd=flags.get("ablate_fd", False),
                    ablate_spm=flags.get("ablate_spm", False),
                    ablate_pl=flags.get("ablate_pl", False))
            for _, flags in ABLATION_VARIANTS
            for fraction in fractions for s in seeds]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest("ablate", config, out_dir, seeds[0])
    rows = [ABLATE_HEADER]
    cells = iter(grid)
    for name, _ in ABLATION_VARIANTS:
        for fraction in fractions:
            strong_pct, weak_pct = fraction * 100.0, 100.0 - fraction * 100.0
            dices, sms = [], []
            for s in seeds:
                run_cfg = next(cells)
                split = make_splits(samples, run_cfg)
                model, _ = fit(split, run_cfg)
                report = evaluate_dataset(model, split.test,
                                          resolution=run_cfg.resolution)
                dices.append(report.mean_dice)
                sms.append(report.mean_sm)
                rows.append(f"{name},{strong_pct:g},{weak_pct:g},"
                            f"{dataset_name},{s},{report.mean_dice:.2f},"
                            f"{report.mean_sm:.2f}")
            rows.append(f"{name},{strong_pct:g},{weak_pct:g},{dataset_name},"
                        f"mean,{np.mean(dices):.2f},{np.mean(sms):.2f}")
    with open(out_dir / "results.csv", "w") as f:
        f.writelines(row + "\n" for row in rows)
    _finish_manifest(manifest, out_dir)
    return 0


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary of a binary mask: foreground pixels with a background 4-neighbor.

    Pixels outside the image count as background, so masks touching the border
    still get a contour there.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def render_overlay(sample: Sample, pred_mask: np.ndarray) -> np.ndarray:
    """Grayscale image with GT contour in blue and predicted contour in red."""
    img8 = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.stack([img8] * 3, axis=-1)
    rgb[mask_contour(sample.strong_mask)] = GT_COLOR
    rgb[mask_contour(pred_mask)] = PRED_COLOR
    return rgb


def cmd_overlay(checkpoint: str, dataset: str, out: str,
                seed: Optional[int]) -> int:
    if not Path(checkpoint).is_file():
        raise ValueError(f"checkpoint not found: {checkpoint}")
    record = load_checkpoint(checkpoint)
    cfg = record.config
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    samples = _load_samples(dataset)
    split = make_splits(samples, cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest("overlay", checkpoint, out_dir, cfg.seed)
    model = build_model(cfg)
    model.load_state_dict(record.parameters)
    for sample in split.test:
        if sample.strong_mask is None:
            raise ValueError(f"sample {sample.id} has no mask to draw")
        prob = predict_probability(model, sample, cfg.resolution)
        rgb = render_overlay(sample, prob >= 0.5)
        Image.fromarray(rgb, mode="RGB").save(out_dir / f"{sample.id}.png")
    _finish_manifest(manifest, out_dir)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _apply_thread_cap() -> None:
    raw = os.environ.get("HYBRIDSEG_THREADS")
    if raw is None:
        return
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"HYBRIDSEG_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ValueError(f"HYBRIDSEG_THREADS must be >= 1, got {cap}")
    torch.set_num_threads(min(torch.get_num_threads(), cap))


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors are single machine-parsable lines."""

    def error(self, message):
        self.exit(2, f"error: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hybridseg",
        description="Hybrid-supervised mass segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="synth config document")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="train config document")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="results CSV (appended)")
    p.add_argument("--seed", type=int, help="override the checkpoint seed")

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config", required=True,
                   help="train config plus 'fractions' and 'seeds' lists")
    p.add_argument("--out", required=True, help="grid output directory")
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--seed", type=int, help="replace the seed list")

    p = sub.add_parser("overlay", help="render contour overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="image output directory")
    p.add_argument("--seed", type=int, help="override the checkpoint seed")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        if args.command == "synth-gen":
            return cmd_synth_gen(args.config, args.out, args.seed)
        if args.command == "train":
            return cmd_train(args.config, args.out, args.dataset, args.seed,
                             args.checkpoint)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.out, args.seed)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out, args.dataset, args.seed)
        if args.command == "overlay":
            return cmd_overlay(args.checkpoint, args.dataset, args.out,
                               args.seed)
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 — CLI boundary: one-line errors
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
