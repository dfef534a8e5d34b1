"""Training loop: splits, supervision routing, poly LR, checkpoints, determinism.

Runs are reproducible by construction: the split is seeded, each epoch draws
its shuffle and augmentation randomness from a fresh `default_rng([seed,
epoch])` stream, and model initialization is keyed by the run seed, so a run
interrupted at any epoch boundary can resume bit-exactly (at 64-bit) from a
checkpoint without replaying earlier epochs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import (
    DatasetSplit,
    Sample,
    augment,
    box_fill_mask,
    box_from_mask,
    resize_sample,
    reversed_box_mask,
)
from .losses import BranchTargets, default_ppa_kernel, total_loss
from .metrics import evaluate_dataset
from .network import DualDecoderNet, NetConfig, SingleDecoderNet

MODES = ("ours", "strong_only", "weak_only", "vanilla_hybrid")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
SCHEDULES = ("poly", "constant")


@dataclass(frozen=True)
class TrainConfig:
    """Full run description; published defaults with desk-scale overrides via desk_config()."""

    lr_init: float = 1e-4
    epochs: int = 50
    power: float = 0.9
    batch_size: int = 8
    resolution: int = 352
    strong_fraction: float = 0.10
    mode: str = "ours"
    ablate_fd: bool = False
    ablate_spm: bool = False
    ablate_pl: bool = False
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    augment: bool = True
    schedule: str = "poly"
    dtype: str = "float32"
    eval_every: int = 1     # 0: evaluate only after the final epoch

    def __post_init__(self):
        if not 0.0 <= self.strong_fraction <= 1.0:
            raise ValueError(f"strong_fraction {self.strong_fraction} outside [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "ours" and (self.ablate_fd or self.ablate_spm or self.ablate_pl):
            raise ValueError("ablation switches are only valid with mode='ours'")
        if self.lr_init <= 0 or self.power <= 0:
            raise ValueError("lr_init and power must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale preset: 64x64, 15 epochs, small widths; finishes on one CPU core."""
    base = dict(lr_init=1e-3, epochs=15, resolution=64, batch_size=8,
                net=NetConfig(stage_widths=(16, 32, 64, 128)))
    base.update(overrides)
    return TrainConfig(**base)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["net"]["stage_widths"] = list(d["net"]["stage_widths"])
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    net = d.pop("net", {})
    if not isinstance(net, NetConfig):
        net = NetConfig(**{**net, "stage_widths": tuple(net.get("stage_widths",
                                                        NetConfig().stage_widths))})
    return TrainConfig(net=net, **d)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """lr_init * (1 - epoch/epochs)^power, evaluated once per epoch."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if cfg.schedule == "constant":
        return cfg.lr_init
    return cfg.lr_init * (1.0 - epoch / cfg.epochs) ** cfg.power


def make_splits(samples: Sequence[Sample], cfg: TrainConfig) -> DatasetSplit:
    """Seeded 80/20 split; ceil(strong_fraction * n_train) train samples keep masks."""
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split, got {len(samples)}")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_train = int(round(0.8 * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    n_strong = math.ceil(cfg.strong_fraction * n_train)
    strong, weak = [], []
    for k, s in enumerate(train):
        if s.strong_mask is None:
            raise ValueError(f"sample {s.id} has no mask; cannot assign supervision")
        box = s.box if s.box is not None else box_from_mask(s.strong_mask)
        if k < n_strong:
            strong.append(replace_sample(s, strong_mask=s.strong_mask, box=box,
                                         supervision="strong"))
        else:
            weak.append(replace_sample(s, strong_mask=None, box=box, supervision="weak"))
    return DatasetSplit(train_strong=strong, train_weak=weak, test=test, seed=cfg.seed)


def replace_sample(s: Sample, **kwargs) -> Sample:
    fields = dict(id=s.id, image=s.image, strong_mask=s.strong_mask, box=s.box,
                  supervision=s.supervision)
    fields.update(kwargs)
    return Sample(**fields)


def training_targets(sample: Sample, mode: str,
                     dtype: torch.dtype = torch.float32) -> Optional[BranchTargets]:
    """Per-branch supervision for one (already resized) sample; None excludes it.

    ours routes pixel masks to the segmentation branch and reversed box masks
    to the background branch; the baselines drive a single segmentation branch
    with masks, box fills, or a mix.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    h, w = sample.image.shape

    def tensor(arr):
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).to(dtype)

    if mode == "ours":
        if sample.box is None:
            raise ValueError(f"sample {sample.id} lacks the box required by mode 'ours'")
        aux = tensor(reversed_box_mask(sample.box, h, w))
        if sample.supervision == "strong":
            return BranchTargets(seg=tensor(sample.strong_mask), aux=aux)
        return BranchTargets(seg=None, aux=aux)
    if mode == "strong_only":
        if sample.supervision != "strong":
            return None
        return BranchTargets(seg=tensor(sample.strong_mask))
    if mode == "weak_only" or sample.supervision != "strong":
        if sample.box is None:
            raise ValueError(f"sample {sample.id} lacks the box required by mode {mode!r}")
        return BranchTargets(seg=tensor(box_fill_mask(sample.box, h, w)))
    return BranchTargets(seg=tensor(sample.strong_mask))  # vanilla_hybrid, strong sample


def build_model(cfg: TrainConfig) -> torch.nn.Module:
    """ours gets the dual-decoder model; baselines an encoder-decoder, so they
    differ from it only in supervision strategy."""
    net = replace(cfg.net, ablate_fd=cfg.ablate_fd, ablate_spm=cfg.ablate_spm,
                  init_seed=cfg.net.init_seed + cfg.seed)
    cls = DualDecoderNet if cfg.mode == "ours" else SingleDecoderNet
    return cls(net).to(DTYPES[cfg.dtype])


@dataclass
class CheckpointRecord:
    parameters: dict
    optimizer: dict
    config: TrainConfig
    epoch: int                # number of completed epochs
    rng_state: dict
    metrics_log_offset: int


def save_checkpoint(record: CheckpointRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(parameters=record.parameters, optimizer=record.optimizer,
                   config=config_to_dict(record.config), epoch=record.epoch,
                   rng_state=record.rng_state,
                   metrics_log_offset=record.metrics_log_offset)
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> CheckpointRecord:
    payload = torch.load(str(path), weights_only=False)
    return CheckpointRecord(parameters=payload["parameters"],
                            optimizer=payload["optimizer"],
                            config=config_from_dict(payload["config"]),
                            epoch=payload["epoch"],
                            rng_state=payload["rng_state"],
                            metrics_log_offset=payload["metrics_log_offset"])


def _epoch_samples(split: DatasetSplit, cfg: TrainConfig) -> List[Sample]:
    if cfg.mode == "strong_only":
        return list(split.train_strong)
    return split.train


def fit(split: DatasetSplit, cfg: TrainConfig,
        checkpoint_dir: Optional[str | Path] = None,
        resume_from: Optional[str | Path] = None,
        ) -> Tuple[torch.nn.Module, List[str]]:
    """Train per config; returns the model and the metrics log lines.

    The log holds one `step,ppa_seg,ppa_aux,percept_aux,total` line per
    optimization step and one `epoch,<n>,<dice>,<sm>` line per evaluated
    epoch.  Aborts with FloatingPointError if the loss goes non-finite.
    """
    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init,
                                 betas=(0.9, 0.999), eps=1e-8)
    dtype = DTYPES[cfg.dtype]
    kernel = default_ppa_kernel(cfg.resolution)
    samples = _epoch_samples(split, cfg)
    if not samples:
        raise ValueError(f"mode {cfg.mode!r} leaves no eligible training samples")
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)

    start_epoch = 0
    log_base = 0    # log lines produced before the resume point
    log: List[str] = []
    if resume_from is not None:
        record = load_checkpoint(resume_from)
        if record.config != cfg:
            raise ValueError("checkpoint config does not match the requested config")
        model.load_state_dict(record.parameters)
        optimizer.load_state_dict(record.optimizer)
        start_epoch = record.epoch
        log_base = record.metrics_log_offset

    for epoch in range(start_epoch, cfg.epochs):
        lr = poly_lr(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(samples))
        step = epoch * steps_per_epoch
        for lo in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            batch = [resize_sample(s, cfg.resolution) for s in batch]
            images = torch.from_numpy(np.stack([s.image for s in batch])).to(dtype)
            targets = [training_targets(s, cfg.mode, dtype=dtype) for s in batch]
            report = total_loss(model(images), targets, kernel,
                                include_perception=not cfg.ablate_pl)
            if not math.isfinite(float(report.total.detach())):
                raise FloatingPointError(f"loss diverged at step {step}")
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
            log.append(report.log_line(step))
            step += 1
        last = epoch == cfg.epochs - 1
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            result = evaluate_dataset(model, split.test, cfg.resolution)
            log.append(f"epoch,{epoch},{result.mean_dice:.6f},{result.mean_sm:.6f}")
        if checkpoint_dir is not None:
            record = CheckpointRecord(
                parameters=model.state_dict(), optimizer=optimizer.state_dict(),
                config=cfg, epoch=epoch + 1,
                rng_state={"seed": cfg.seed, "next_epoch": epoch + 1},
                metrics_log_offset=log_base + len(log))
            save_checkpoint(record, Path(checkpoint_dir) / f"epoch_{epoch:04d}.pt")
            save_checkpoint(record, Path(checkpoint_dir) / "last.pt")
    return model, log
