"""Manifest-driven image ingestion, augmentation, stratified folds, and a
seeded synthetic dataset generator.

The synthetic images stand in for the clinical chest X-ray set at desk
scale. Each class gets a distinct oriented stripe texture (diagonal,
vertical, horizontal) plus dark elliptical blobs and noise; every image is
renormalized to a fixed mean/contrast so that mean-pixel statistics carry
no class signal and a convolutional model is actually required.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ContractError, IngestionError

CLASS_NAMES_3 = ("COVID-19", "Pneumonia", "No-Findings")
CLASS_NAMES_2 = ("COVID-19", "No-Findings")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    class_name: str


@dataclass
class DatasetManifest:
    records: list
    class_names: tuple

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> dict:
        counts = {name: 0 for name in self.class_names}
        for r in self.records:
            counts[r.class_name] += 1
        return counts


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    max_translate_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0,1], got {self.hflip_prob}")
        if not 0.0 <= self.max_translate_frac <= 0.25:
            raise ConfigError(f"max_translate_frac must lie in [0,0.25], got {self.max_translate_frac}")


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_name"])
        for r in manifest.records:
            writer.writerow([r.path, r.class_name])


def read_manifest(path, class_names: Optional[Sequence[str]] = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "class_name"]:
            raise IngestionError(f"manifest {path}: expected header 'path,class_name', got {header}")
        rows = [row for row in reader if row]
    names = tuple(class_names) if class_names else tuple(sorted({r[1] for r in rows},
                                                               key=lambda n: _canonical_order(n)))
    index = {name: i for i, name in enumerate(names)}
    records = []
    for row in rows:
        if len(row) != 2:
            raise IngestionError(f"manifest {path}: malformed row {row}")
        rel, cname = row
        if cname not in index:
            raise IngestionError(f"manifest {path}: unknown class {cname!r} (catalog {names})")
        full = rel if Path(rel).is_absolute() else str(path.parent / rel)
        records.append(ManifestRecord(path=full, label=index[cname], class_name=cname))
    return DatasetManifest(records=records, class_names=names)


def _canonical_order(name: str) -> int:
    if name in CLASS_NAMES_3:
        return CLASS_NAMES_3.index(name)
    return len(CLASS_NAMES_3)


def load_image(path, side: int = 256) -> np.ndarray:
    """Decode, bilinear-resize to side x side, replicate grayscale to three
    channels, scale to [0,1]. Returns float32 [3, side, side]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            if img.size != (side, side):
                img = img.resize((side, side), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def hflip(pixels: np.ndarray) -> np.ndarray:
    """Mirror across the vertical axis."""
    return pixels[:, :, ::-1].copy()


def translate(pixels: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift by integer offsets with zero-filled borders."""
    out = np.zeros_like(pixels)
    _, h, w = pixels.shape
    ys, yd = (0, dy) if dy >= 0 else (-dy, 0)
    xs, xd = (0, dx) if dx >= 0 else (-dx, 0)
    hh, ww = h - abs(dy), w - abs(dx)
    if hh > 0 and ww > 0:
        out[:, yd:yd + hh, xd:xd + ww] = pixels[:, ys:ys + hh, xs:xs + ww]
    return out


def augment(pixels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip plus slight integer translation. Always draws
    the same number of random values so the stream stays aligned."""
    side = pixels.shape[-1]
    max_t = int(cfg.max_translate_frac * side)
    u = rng.random()
    dy = int(rng.integers(-max_t, max_t + 1))
    dx = int(rng.integers(-max_t, max_t + 1))
    out = pixels
    if u < cfg.hflip_prob:
        out = hflip(out)
    if dy or dx:
        out = translate(out, dy, dx)
    return out


def stratified_kfold(labels: np.ndarray, n_folds: int = 5, seed: int = 0):
    """Return n_folds (train_idx, test_idx) pairs; per-class test counts
    across folds differ by at most one and the test folds partition the set."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([0xF01D, int(seed)]))
    fold_members: list[list[int]] = [[] for _ in range(n_folds)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < n_folds:
            raise ConfigError(f"class {cls} has {len(idx)} samples, fewer than {n_folds} folds")
        idx = rng.permutation(idx)
        for pos, i in enumerate(idx):
            fold_members[pos % n_folds].append(int(i))
    all_idx = np.arange(len(labels))
    splits = []
    for f in range(n_folds):
        test = np.array(sorted(fold_members[f]), dtype=np.int64)
        mask = np.ones(len(labels), dtype=bool)
        mask[test] = False
        splits.append((all_idx[mask], test))
    return splits


# ------------------------------------------------------------- synthetic data

def _synth_image(rng: np.random.Generator, side: int, cls: int) -> np.ndarray:
    """Class-conditional grayscale texture in [0,1], uint8-quantized later.

    Class 0: diagonal stripes, 1: vertical stripes, 2: horizontal stripes;
    blob count also differs per class. Mean and contrast are renormalized
    to constants afterwards.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(5.0, 7.0)
    if cls == 0:
        img = np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2) + phase)
    elif cls == 1:
        img = np.sin(2 * np.pi * freq * xx + phase)
    else:
        img = np.sin(2 * np.pi * freq * yy + phase)
    img = 0.5 * img
    for _ in range(2 * (cls + 1)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.05, 0.12, size=2)
        img -= 0.6 * np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    img += rng.normal(0, 0.10, size=(side, side))
    img = (img - img.mean()) / (img.std() + 1e-8)
    img = 0.5 + 0.18 * img
    return np.clip(img, 0.0, 1.0)


def synth_generate(out_dir, n_per_class: int, classes: int = 3, side: int = 256,
                   seed: int = 0) -> DatasetManifest:
    """Write a deterministic synthetic dataset (PNG files + manifest.csv)
    under out_dir and return its manifest."""
    if n_per_class < 1:
        raise ConfigError(f"empty class: n_per_class must be >= 1, got {n_per_class}")
    if classes not in (2, 3):
        raise ConfigError(f"classes must be 2 or 3, got {classes}")
    names = CLASS_NAMES_3 if classes == 3 else CLASS_NAMES_2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    rel_records = []
    for cls, name in enumerate(names):
        cls_dir = out_dir / name
        cls_dir.mkdir(exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), cls, i]))
            # 2-class task keeps the same texture identities as the 3-class one
            texture_cls = cls if classes == 3 else (0 if cls == 0 else 2)
            img = _synth_image(rng, side, texture_cls)
            arr = np.round(img * 255.0).astype(np.uint8)
            rel = f"{name}/{name.lower()}_{i:04d}.png"
            Image.fromarray(arr, mode="L").save(out_dir / rel)
            records.append(ManifestRecord(path=str(out_dir / rel), label=cls, class_name=name))
            rel_records.append(ManifestRecord(path=rel, label=cls, class_name=name))
    write_manifest(out_dir / "manifest.csv",
                   DatasetManifest(records=rel_records, class_names=names))
    return DatasetManifest(records=records, class_names=names)


def load_dataset(manifest: DatasetManifest, side: int) -> tuple:
    """Decode every manifest image; returns (images [N,3,side,side] float32, labels)."""
    images = np.stack([load_image(r.path, side) for r in manifest.records])
    return images, manifest.labels
