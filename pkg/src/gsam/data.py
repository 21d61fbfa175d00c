"""Synthetic shape datasets, paired augmentation, PNG export and the mIoU metric."""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image


@dataclass
class Sample:
    image: np.ndarray  # float32 [1, 3, H, W] in [0, 1]
    label: np.ndarray  # int64 [H, W]

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ValueError(f"image must be [1, 3, H, W], got {self.image.shape}")
        if self.image.shape[2:] != self.label.shape:
            raise ValueError(f"image {self.image.shape[2:]} and label {self.label.shape} dims differ")


class SegmentationSource(Protocol):
    """Anything indexable that yields ``Sample`` objects (real-dataset loaders plug in here)."""

    num_classes: int

    def __len__(self) -> int: ...

    def __getitem__(self, i: int) -> Sample: ...


def class_colors(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes - 1) / max(num_classes - 1, 1)
    return np.array([colorsys.hsv_to_rgb(h, 0.85, 0.9) for h in hues], dtype=np.float32)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _shape_mask(rng: np.random.Generator, h: int, w: int, kind: str, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rect":
        sh = size * rng.uniform(0.6, 1.0)
        sw = size * rng.uniform(0.6, 1.0)
        top, left = int(round(cy - sh / 2)), int(round(cx - sw / 2))
        mask = np.zeros((h, w), bool)
        mask[max(top, 0): max(top + max(int(round(sh)), 3), 0), max(left, 0): max(left + max(int(round(sw)), 3), 0)] = True
        return mask
    if kind == "ellipse":
        ay = max(size * rng.uniform(0.5, 1.0) / 2, 1.5)
        ax = max(size * rng.uniform(0.5, 1.0) / 2, 1.5)
        return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    # thin line: distance to a segment of length ~2*size
    theta = rng.uniform(0, math.pi)
    half = max(size, 3.0)
    dy, dx = math.sin(theta), math.cos(theta)
    t = np.clip((yy - cy) * dy + (xx - cx) * dx, -half, half)
    dist = np.hypot(yy - (cy + t * dy), xx - (cx + t * dx))
    return dist <= rng.uniform(1.0, 2.0)


SHAPE_KINDS = ("rect", "ellipse", "line")


def generate_shapes(n: int, size: Tuple[int, int], num_classes: int, seed: int) -> List[Sample]:
    """Textured backgrounds with colored rectangles, ellipses and thin lines.

    Class ``k >= 1`` owns a fixed hue; shape kind, size (3 px up to half the
    image) and position are random. Label 0 is background. Every sample has at
    least one foreground shape. Deterministic in ``seed``.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2 (background + shapes)")
    h, w = size
    colors = class_colors(num_classes)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        base = rng.uniform(0.25, 0.6)
        tex = 0.15 * (_smooth_noise(rng, h, w, 4) - 0.5) + 0.05 * (rng.random((h, w)) - 0.5)
        tint = rng.uniform(-0.05, 0.05, size=3)
        img = np.clip(base + tex[None] + tint[:, None, None], 0, 1).astype(np.float32)
        label = np.zeros((h, w), np.int64)
        n_shapes = int(rng.integers(2, 7))
        for _ in range(n_shapes):
            k = int(rng.integers(1, num_classes))
            kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            shape_size = rng.uniform(3, min(h, w) / 2)
            mask = _shape_mask(rng, h, w, kind, shape_size)
            if not mask.any():
                continue
            color = np.clip(colors[k - 1] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
            shade = 1.0 + 0.1 * (_smooth_noise(rng, h, w, 2) - 0.5)
            img[:, mask] = np.clip(color[:, None] * shade[mask][None], 0, 1)
            label[mask] = k
        if not (label > 0).any():
            # guarantee a foreground object: a small centered square of class 1
            label[h // 2 - 2: h // 2 + 2, w // 2 - 2: w // 2 + 2] = 1
            img[:, label == 1] = colors[0][:, None]
        out.append(Sample(img[None].astype(np.float32), label))
    return out


@dataclass(frozen=True)
class AugmentConfig:
    crop: Tuple[int, int] = (64, 64)
    pad_before_crop: bool = False
    hflip: bool = True
    rot90: bool = True
    seed: int = 0
    pad: Optional[int] = None  # pixels per side in pad mode; default ceil(max(crop) / 8)

    def pad_amount(self) -> int:
        if not self.pad_before_crop:
            return 0
        return self.pad if self.pad is not None else math.ceil(max(self.crop) / 8)


def sample_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Pad (optional), random crop, horizontal flip and 90-degree rotation.

    The same geometric transform is applied to image and label; labels are
    only ever indexed, never interpolated. In pad mode the image is padded by
    reflection and the label by edge replication.
    """
    img = sample.image[0]
    label = sample.label
    p = cfg.pad_amount()
    if p:
        img = np.pad(img, ((0, 0), (p, p), (p, p)), mode="reflect")
        label = np.pad(label, ((p, p), (p, p)), mode="edge")
    ch, cw = cfg.crop
    h, w = label.shape
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than (padded) image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img = img[:, top: top + ch, left: left + cw]
    label = label[top: top + ch, left: left + cw]
    if cfg.hflip and rng.random() < 0.5:
        img = img[:, :, ::-1]
        label = label[:, ::-1]
    if cfg.rot90:
        k = int(rng.integers(0, 4)) if ch == cw else 2 * int(rng.integers(0, 2))
        if k:
            img = np.rot90(img, k, axes=(1, 2))
            label = np.rot90(label, k)
    return Sample(np.ascontiguousarray(img[None]), np.ascontiguousarray(label))


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Rows are ground truth, columns predictions."""
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"pred and gt sizes differ: {pred.shape} vs {gt.shape}")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
            raise ValueError(f"labels outside [0, {k})")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> Tuple[List[float], float]:
        if self.total == 0:
            raise ValueError("no pixels evaluated")
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(0) - tp
        fn = self.counts.sum(1) - tp
        denom = tp + fp + fn
        per_class = [float(t / d) if d > 0 else float("nan") for t, d in zip(tp, denom)]
        valid = [v for v in per_class if not math.isnan(v)]
        return per_class, float(np.mean(valid))


def miou(pred_labels, gt_labels, num_classes: int) -> Tuple[List[float], float]:
    """Per-class IoU and their mean; classes absent from both inputs get NaN and are skipped."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return ConfusionMatrix(num_classes).update(pred, gt).iou()


def export_dataset(samples: Sequence[Sample], out_dir: Union[str, Path], num_classes: int,
                   seed: int) -> Path:
    """Write ``images/*.png`` (RGB), ``labels/*.png`` (class ids) and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        rgb = np.round(s.image[0].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(out / "images" / name)
        Image.fromarray(s.label.astype(np.uint8), "L").save(out / "labels" / name)
        files.append(name)
    sizes = sorted({tuple(s.label.shape) for s in samples})
    manifest = {
        "n": len(samples),
        "sizes": [list(sz) for sz in sizes],
        "num_classes": num_classes,
        "seed": seed,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


class PngDataset:
    """Loads a directory written by ``export_dataset``."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.num_classes = int(self.manifest["num_classes"])
        self.files = list(self.manifest["files"])

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, i: int) -> Sample:
        name = self.files[i]
        rgb = np.asarray(Image.open(self.root / "images" / name).convert("RGB"), np.float32) / 255.0
        label = np.asarray(Image.open(self.root / "labels" / name), np.int64)
        return Sample(rgb.transpose(2, 0, 1)[None].copy(), label.copy())

    def samples(self) -> List[Sample]:
        return [self[i] for i in range(len(self))]


def majority_baseline(samples: Iterable[Sample], num_classes: int) -> float:
    """mIoU of predicting the most frequent training class everywhere."""
    samples = list(samples)
    freq = np.zeros(num_classes, np.int64)
    for s in samples:
        freq += np.bincount(s.label.ravel(), minlength=num_classes)
    majority = int(freq.argmax())
    cm = ConfusionMatrix(num_classes)
    for s in samples:
        cm.update(np.full_like(s.label, majority), s.label)
    return cm.iou()[1]
