"""Samples, labels and corpora.

A sample is a grayscale image with a pixel-wise mask (strong label), a
bounding box (weak label), or both.  The stored weak label is the *reversed*
box mask: 1 marks definite background, 0 marks the uncertain area that may
contain the mass.  Plain box fills are derived on demand for the baselines.

Boxes use half-open integer coordinates: (row_min, col_min) inclusive,
(row_max, col_max) exclusive.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

Supervision = Literal["strong", "weak"]


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: rows [row_min, row_max), cols [col_min, col_max)."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        for name in ("row_min", "col_min", "row_max", "col_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"box coordinate {name}={v!r} must be a nonnegative integer")
        if not (self.row_min < self.row_max and self.col_min < self.col_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min) * (self.col_max - self.col_min)

    def check_within(self, height: int, width: int) -> None:
        if self.row_max > height or self.col_max > width:
            raise ValueError(f"box {self} exceeds image bounds {height}x{width}")


@dataclass
class Sample:
    """One image plus whatever labels it carries."""

    id: str
    image: np.ndarray                       # (H, W) float in [0, 1]
    strong_mask: Optional[np.ndarray]       # (H, W) uint8 {0, 1}
    box: Optional[BoundingBox]
    supervision: Supervision

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"sample {self.id}: image must be 2-D, got {self.image.shape}")
        if self.supervision == "strong" and self.strong_mask is None:
            raise ValueError(f"sample {self.id}: strong supervision requires a mask")
        if self.supervision == "weak" and self.box is None:
            raise ValueError(f"sample {self.id}: weak supervision requires a box")
        if self.strong_mask is not None:
            if self.strong_mask.shape != self.image.shape:
                raise ValueError(f"sample {self.id}: mask shape {self.strong_mask.shape} "
                                 f"!= image shape {self.image.shape}")
            if not self.strong_mask.any():
                raise ValueError(f"sample {self.id}: mask has no foreground")
        if self.box is not None:
            self.box.check_within(*self.image.shape)
        if self.strong_mask is not None and self.box is not None:
            inside = self.strong_mask.copy()
            inside[self.box.row_min:self.box.row_max, self.box.col_min:self.box.col_max] = 0
            if inside.any():
                raise ValueError(f"sample {self.id}: mask foreground outside box")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetSplit:
    train_strong: list[Sample]
    train_weak: list[Sample]
    test: list[Sample]
    seed: int

    @property
    def train(self) -> list[Sample]:
        return self.train_strong + self.train_weak


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic low-contrast corpus generator."""

    image_size: int = 64
    n_samples: int = 250
    mass_radius_range: tuple[float, float] = (0.08, 0.18)   # fractions of image size
    mass_contrast: float = 0.30
    texture_scale: float = 0.03                             # noise smoothing, fraction of size
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.mass_radius_range
        if not (0.0 < lo <= hi < 0.5):
            raise ValueError(f"mass_radius_range {self.mass_radius_range} must lie in (0, 0.5)")
        if not (0.0 < self.mass_contrast < 1.0):
            raise ValueError(f"mass_contrast {self.mass_contrast} must lie in (0, 1)")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def box_from_mask(mask: np.ndarray) -> BoundingBox:
    """Tightest half-open box containing all foreground pixels."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("empty mask")
    return BoundingBox(int(rows.min()), int(cols.min()),
                       int(rows.max()) + 1, int(cols.max()) + 1)


def reversed_box_mask(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Reversed weak label: 1 = definite background, 0 = uncertain area (box interior)."""
    box.check_within(height, width)
    out = np.ones((height, width), dtype=np.uint8)
    out[box.row_min:box.row_max, box.col_min:box.col_max] = 0
    return out


def box_fill_mask(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Box interior as a pseudo-mask; complement of reversed_box_mask."""
    box.check_within(height, width)
    out = np.zeros((height, width), dtype=np.uint8)
    out[box.row_min:box.row_max, box.col_min:box.col_max] = 1
    return out


# Background texture constants.  These are deliberately not exposed in
# SynthConfig: the knobs that matter for experiments are size, mass geometry,
# contrast and smoothing.
_BASE_LEVEL = 0.30
_NOISE_AMP = 0.08
_GLAND_COUNT = (2, 5)           # inclusive range
_GLAND_INTENSITY = (0.08, 0.20)
_GLAND_HALFLEN = (0.15, 0.35)   # fraction of size
_GLAND_SIGMA = (0.015, 0.040)   # fraction of size


def _gland_streaks(rng: np.random.Generator, size: int) -> np.ndarray:
    """A few elongated bright ridges imitating normal gland tissue."""
    canvas = np.zeros((size, size), dtype=np.float64)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    n = int(rng.integers(_GLAND_COUNT[0], _GLAND_COUNT[1] + 1))
    for _ in range(n):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        theta = rng.uniform(0.0, math.pi)
        half_len = rng.uniform(*_GLAND_HALFLEN) * size
        sigma = rng.uniform(*_GLAND_SIGMA) * size
        amp = rng.uniform(*_GLAND_INTENSITY)
        dy, dx = math.sin(theta), math.cos(theta)
        # distance from each pixel to the segment through (cy,cx) with direction (dy,dx)
        t = (rr - cy) * dy + (cc - cx) * dx
        t = np.clip(t, -half_len, half_len)
        d2 = (rr - cy - t * dy) ** 2 + (cc - cx - t * dx) ** 2
        canvas += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    return canvas


def synthesize_sample(rng: np.random.Generator, cfg: SynthConfig,
                      sample_id: str = "synth") -> Sample:
    """Draw one sample: textured background plus a single soft-edged elliptical mass.

    The strong mask is the exact ellipse support before edge blurring, the box
    is derived from the mask.  Fully deterministic given the rng state.
    """
    s = cfg.image_size
    noise = rng.standard_normal((s, s))
    sigma_noise = cfg.texture_scale * s
    if sigma_noise > 1e-3:
        noise = gaussian_filter(noise, sigma=sigma_noise, mode="reflect")
        noise = noise / max(float(noise.std()), 1e-12)
    background = _BASE_LEVEL + _NOISE_AMP * noise + _gland_streaks(rng, s)

    r_lo, r_hi = cfg.mass_radius_range
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    while True:
        a = rng.uniform(r_lo, r_hi) * s
        b = rng.uniform(r_lo, r_hi) * s
        theta = rng.uniform(0.0, math.pi)
        # half extents of the rotated ellipse along rows/cols
        ext_r = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
        ext_c = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
        if 2.0 * ext_r + 2.0 >= s or 2.0 * ext_c + 2.0 >= s:
            continue
        cy = rng.uniform(ext_r + 1.0, s - ext_r - 1.0)
        cx = rng.uniform(ext_c + 1.0, s - ext_c - 1.0)
        u = (cc - cx) * math.cos(theta) + (rr - cy) * math.sin(theta)
        v = -(cc - cx) * math.sin(theta) + (rr - cy) * math.cos(theta)
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
        if mask.any():
            break

    sigma_edge = max(0.6, 0.015 * s)
    image = background + cfg.mass_contrast * gaussian_filter(mask.astype(np.float64),
                                                             sigma=sigma_edge, mode="constant")
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(id=sample_id, image=image, strong_mask=mask,
                  box=box_from_mask(mask), supervision="strong")


def synthesize_dataset(cfg: SynthConfig) -> list[Sample]:
    rng = np.random.default_rng(cfg.seed)
    return [synthesize_sample(rng, cfg, sample_id=f"synth_{i:04d}")
            for i in range(cfg.n_samples)]


def flip_sample(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Flip image, mask and box consistently.  Applying the same flips twice
    restores the original sample."""
    image = sample.image
    mask = sample.strong_mask
    box = sample.box
    h, w = image.shape
    if horizontal:
        image = image[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
        if box is not None:
            box = BoundingBox(box.row_min, w - box.col_max, box.row_max, w - box.col_min)
    if vertical:
        image = image[::-1, :]
        mask = mask[::-1, :] if mask is not None else None
        if box is not None:
            box = BoundingBox(h - box.row_max, box.col_min, h - box.row_min, box.col_max)
    return Sample(id=sample.id, image=np.ascontiguousarray(image),
                  strong_mask=np.ascontiguousarray(mask) if mask is not None else None,
                  box=box, supervision=sample.supervision)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal and vertical flips, each with probability 0.5."""
    do_h = bool(rng.random() < 0.5)
    do_v = bool(rng.random() < 0.5)
    return flip_sample(sample, do_h, do_v)


def resize_map(arr: np.ndarray, height: int, width: int, *, binary: bool) -> np.ndarray:
    """Resize one map: bilinear for intensities, nearest for binary masks."""
    if binary:
        im = Image.fromarray((np.asarray(arr) > 0).astype(np.uint8) * 255, mode="L")
        out = np.asarray(im.resize((width, height), Image.NEAREST))
        return (out > 127).astype(np.uint8)
    im = Image.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float32)


def resize_sample(sample: Sample, size: int) -> Sample:
    """Resize to size x size.  Masks stay binary (nearest neighbour); the box
    is rescaled with outward rounding so it never clips mask foreground."""
    if size < 16:
        raise ValueError("target size must be >= 16")
    h, w = sample.image.shape
    if (h, w) == (size, size):
        return sample
    image = resize_map(sample.image, size, size, binary=False)
    mask = None
    if sample.strong_mask is not None:
        mask = resize_map(sample.strong_mask, size, size, binary=True)
    box = None
    if sample.box is not None:
        sr, sc = size / h, size / w
        box = BoundingBox(
            max(0, math.floor(sample.box.row_min * sr)),
            max(0, math.floor(sample.box.col_min * sc)),
            min(size, math.ceil(sample.box.row_max * sr)),
            min(size, math.ceil(sample.box.col_max * sc)),
        )
    return Sample(id=sample.id, image=image, strong_mask=mask, box=box,
                  supervision=sample.supervision)


def save_dataset(samples: list[Sample], root_dir: str | Path,
                 synth_config: Optional[SynthConfig] = None) -> None:
    """Write the on-disk layout: images/<id>.png, masks/<id>.png, boxes.csv."""
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if any(s.strong_mask is not None for s in samples):
        (root / "masks").mkdir(exist_ok=True)
    box_rows = []
    for s in sorted(samples, key=lambda x: x.id):
        img8 = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(root / "images" / f"{s.id}.png")
        if s.strong_mask is not None:
            Image.fromarray((s.strong_mask > 0).astype(np.uint8) * 255, mode="L").save(
                root / "masks" / f"{s.id}.png")
        if s.box is not None:
            box_rows.append((s.id, s.box.row_min, s.box.col_min, s.box.row_max, s.box.col_max))
    if box_rows:
        with open(root / "boxes.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "row_min", "col_min", "row_max", "col_max"])
            writer.writerows(box_rows)
    if synth_config is not None:
        with open(root / "synth_config.json", "w") as f:
            json.dump(asdict(synth_config), f, indent=2, sort_keys=True)
            f.write("\n")


def load_dataset(root_dir: str | Path) -> list[Sample]:
    """Read the directory layout back into samples.

    A sample is strong when a mask file exists, weak otherwise.  Boxes come
    from boxes.csv when present (preferred) and are derived from the mask if
    not.  An image with neither mask nor box row is an error.
    """
    root = Path(root_dir)
    image_dir = root / "images"
    if not image_dir.is_dir():
        return []
    boxes: dict[str, BoundingBox] = {}
    boxes_path = root / "boxes.csv"
    if boxes_path.exists():
        with open(boxes_path, newline="") as f:
            for row in csv.DictReader(f):
                boxes[row["id"]] = BoundingBox(int(row["row_min"]), int(row["col_min"]),
                                               int(row["row_max"]), int(row["col_max"]))
    samples = []
    for img_path in sorted(image_dir.glob("*.png")):
        sid = img_path.stem
        image = np.asarray(Image.open(img_path).convert("L"), dtype=np.float32) / 255.0
        mask_path = root / "masks" / f"{sid}.png"
        mask = None
        if mask_path.exists():
            mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
            if mask.shape != image.shape:
                raise ValueError(f"sample {sid}: mask shape {mask.shape} does not match "
                                 f"image shape {image.shape}")
        box = boxes.get(sid)
        if box is None and mask is not None:
            box = box_from_mask(mask)
        if box is None:
            raise ValueError(f"sample {sid}: no box and no mask")
        samples.append(Sample(id=sid, image=image, strong_mask=mask, box=box,
                              supervision="strong" if mask is not None else "weak"))
    return samples
