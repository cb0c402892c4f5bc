"""Synthetic multi-class "organ" images, augmentation and on-disk datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nst

SHAPES = ("ellipse", "rectangle", "annulus")


class DataError(ValueError):
    """Bad dataset contents or configuration."""


@dataclass
class SegSample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8
    sample_id: str


@dataclass
class SynthConfig:
    num_classes: int = 4
    n_train: int = 200
    n_test: int = 50
    image_size: int = 64
    shapes: list[str] = field(default_factory=list)
    intensity_bands: list[list[float]] = field(default_factory=list)
    radius_range: list[float] = field(default_factory=lambda: [6.0, 14.0])
    noise_sigma: float = 0.05
    class_names: list[str] = field(default_factory=list)
    seed: int = 7

    def __post_init__(self):
        k = self.num_classes
        if k < 2:
            raise DataError("num_classes must be at least 2")
        if not self.shapes:
            self.shapes = [SHAPES[i % len(SHAPES)] for i in range(k - 1)]
        if not self.intensity_bands:
            # evenly spaced, well separated bands; background lowest
            step = 1.0 / k
            self.intensity_bands = [[round(i * step + 0.1 * step, 6), round(i * step + 0.5 * step, 6)]
                                    for i in range(k)]
        if not self.class_names:
            self.class_names = ["background"] + [f"organ{i}" for i in range(1, k)]
        if len(self.shapes) != k - 1:
            raise DataError(f"need {k - 1} foreground shapes, got {len(self.shapes)}")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise DataError(f"unknown shapes {unknown}; choose from {list(SHAPES)}")
        if len(self.intensity_bands) != k or len(self.class_names) != k:
            raise DataError("intensity_bands and class_names need one entry per class")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise DataError(f"bad radius_range {self.radius_range}")
        if 2 * hi + 2 > self.image_size:
            raise DataError(f"shapes of radius {hi} cannot fit a {self.image_size}px image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown data config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)


@dataclass
class Dataset:
    splits: dict[str, list[SegSample]]
    class_names: list[str]

    def __getitem__(self, split: str) -> list[SegSample]:
        return self.splits[split]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _shape_mask(kind: str, size: int, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(hi + 0.5, size - 1.5 - hi, size=2)
    if kind == "ellipse":
        a, b = rng.uniform(lo, hi, size=2)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        a, b = rng.uniform(lo, hi, size=2)
        return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
    r_out = rng.uniform(max(lo, 3.0), hi)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out ** 2) & (d2 >= (0.5 * r_out) ** 2)


def make_sample(cfg: SynthConfig, rng: np.random.Generator, sample_id: str) -> SegSample:
    n = cfg.image_size
    label = np.zeros((n, n), dtype=np.uint8)
    image = np.full((n, n), rng.uniform(*cfg.intensity_bands[0]))
    lo, hi = cfg.radius_range
    for c in range(1, cfg.num_classes):
        mask = _shape_mask(cfg.shapes[c - 1], n, rng, lo, hi)
        label[mask] = c
        image[mask] = rng.uniform(*cfg.intensity_bands[c])
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[..., None]
    return SegSample(image, label, sample_id)


def generate(cfg: SynthConfig) -> Dataset:
    """Seeded train/test splits; later classes paint over earlier ones."""
    rng = np.random.default_rng(cfg.seed)
    splits = {}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        samples = [make_sample(cfg, rng, f"{split}_{i:04d}") for i in range(count)]
        if samples:
            present = np.zeros(cfg.num_classes, dtype=bool)
            for s in samples:
                present[np.unique(s.label)] = True
            if not present.all():
                raise DataError(f"classes {np.flatnonzero(~present).tolist()} absent from {split} "
                                "split; enlarge radius_range or the split")
        splits[split] = samples
    return Dataset(splits, list(cfg.class_names))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def flip(sample: SegSample, axis: int) -> SegSample:
    return SegSample(np.flip(sample.image, axis).copy(), np.flip(sample.label, axis).copy(),
                     sample.sample_id)


def rot90(sample: SegSample, k: int) -> SegSample:
    return SegSample(np.rot90(sample.image, k, axes=(0, 1)).copy(),
                     np.rot90(sample.label, k, axes=(0, 1)).copy(), sample.sample_id)


def rotate(sample: SegSample, angle: float) -> SegSample:
    """Small-angle rotation; nearest-neighbour for image and label, zero fill."""
    img = ndimage.rotate(sample.image, angle, axes=(1, 0), order=0, reshape=False)
    lab = ndimage.rotate(sample.label, angle, axes=(1, 0), order=0, reshape=False)
    return SegSample(img.astype(sample.image.dtype), lab.astype(sample.label.dtype), sample.sample_id)


def augment(sample: SegSample, rng: np.random.Generator, max_angle: float = 20.0) -> SegSample:
    """Random flip (p=1/2, either axis), then random rotation (p=1/2).

    A rotation is a multiple of 90 degrees or, with equal chance, a small
    angle in [-max_angle, max_angle]. Image and label get the same transform.
    """
    out = sample
    if rng.random() < 0.5:
        out = flip(out, int(rng.integers(2)))
    if rng.random() < 0.5:
        if rng.random() < 0.5:
            out = rot90(out, int(rng.integers(1, 4)))
        else:
            out = rotate(out, float(rng.uniform(-max_angle, max_angle)))
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def save(dataset: Dataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in dataset.splits.items():
        for s in samples:
            img_file = f"images/{s.sample_id}.nst"
            lab_file = f"labels/{s.sample_id}.nst"
            nst.save(root / img_file, s.image)
            nst.save(root / lab_file, s.label.astype(np.uint8))
            entries.append({"id": s.sample_id, "image_file": img_file,
                            "label_file": lab_file, "split": split})
    manifest = {"samples": entries, "class_names": list(dataset.class_names)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load(path) -> Dataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(mf.read_text())
    splits: dict[str, list[SegSample]] = {}
    for e in manifest["samples"]:
        for key in ("image_file", "label_file"):
            if not (root / e[key]).exists():
                raise DataError(f"missing file {e[key]} for sample {e['id']}")
        img = nst.load(root / e["image_file"])
        lab = nst.load(root / e["label_file"])
        if img.shape[:2] != lab.shape:
            raise DataError(f"sample {e['id']}: image {img.shape} and label {lab.shape} disagree")
        splits.setdefault(e["split"], []).append(SegSample(img, lab, e["id"]))
    return Dataset(splits, list(manifest["class_names"]))
