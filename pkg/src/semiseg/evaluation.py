"""Tile-level inference, confusion-matrix metrics and label-map rendering."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .data import ClassNomenclature, TileRecord, read_image, read_labels, save_png, to_unit
from .models import DOWNSAMPLE


@dataclass
class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty(self) -> bool:
        return self.total == 0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, void_ids: Iterable[int] = (),
                         num_classes: Optional[int] = None) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    keep = ~np.isin(gt, list(void_ids))
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError(f"class id outside [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of correctly classified pixels; 0.0 for an empty matrix (see ``cm.empty``)."""
    if cm.empty:
        return 0.0
    return float(np.trace(cm.counts)) / cm.total


def mean_iou(cm: ConfusionMatrix, include: str = "present_classes") -> float:
    """Mean of TP/(TP+FP+FN).

    ``present_classes`` averages over classes seen in prediction or truth;
    ``all_classes`` counts never-seen classes as IoU 0.
    """
    if include not in ("present_classes", "all_classes"):
        raise ValueError(f"include must be 'present_classes' or 'all_classes', not {include!r}")
    # exact rational mean, rounded once: independent of summation order
    tp = np.diag(cm.counts)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    ious = [Fraction(int(t), int(u)) if u else None for t, u in zip(tp, union)]
    if include == "all_classes":
        values = [v or Fraction(0) for v in ious]
    else:
        values = [v for v in ious if v is not None]
    if not values:
        return 0.0
    return float(sum(values) / len(values))


def metrics_report(cm: ConfusionMatrix, nomenclature: Optional[ClassNomenclature] = None) -> dict:
    names = nomenclature.names if nomenclature else [str(i) for i in range(cm.num_classes)]
    iou = cm.per_class_iou()
    return {
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, iou)},
        "miou": mean_iou(cm),
        "miou_all_classes": mean_iou(cm, "all_classes"),
        "oa": overall_accuracy(cm),
        "pixel_counts": {n: int(c) for n, c in zip(names, cm.counts.sum(1))},
        "confusion_matrix": cm.counts.tolist(),
    }


def write_metrics(report: dict, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2))


# --- inference ---

def _window_starts(length: int, patch: int, stride: int) -> list[int]:
    if length <= patch:
        return [0]
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


@torch.no_grad()
def predict_scores(model, image: np.ndarray, patch_px: int, overlap_px: int = 0,
                   batch_size: int = 4) -> np.ndarray:
    """Sliding-window class scores (C×H×W) for an H×W×3 image in [0, 1].

    Scores of overlapping windows are averaged. Images smaller than a window
    are reflect-padded and the result cropped back.
    """
    if patch_px <= 0 or patch_px % DOWNSAMPLE:
        raise ValueError(f"patch_px must be a positive multiple of {DOWNSAMPLE}")
    if not 0 <= overlap_px < patch_px:
        raise ValueError("overlap_px must satisfy 0 <= overlap < patch")
    h, w = image.shape[:2]
    ph, pw = max(0, patch_px - h), max(0, patch_px - w)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    H, W = image.shape[:2]
    stride = patch_px - overlap_px
    windows = [(r, c) for r in _window_starts(H, patch_px, stride) for c in _window_starts(W, patch_px, stride)]

    was_training = model.training
    model.eval()
    scores = None
    hits = np.zeros((H, W), dtype=np.float32)
    try:
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            batch = np.stack([image[r:r + patch_px, c:c + patch_px] for r, c in chunk])
            x = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float()
            out = model.forward_supervised(x).numpy()
            if scores is None:
                scores = np.zeros((out.shape[1], H, W), dtype=np.float32)
            for (r, c), s in zip(chunk, out):
                scores[:, r:r + patch_px, c:c + patch_px] += s
                hits[r:r + patch_px, c:c + patch_px] += 1
    finally:
        model.train(was_training)
    scores /= hits
    return scores[:, :h, :w]


def stitched_inference(model, tile: TileRecord, patch_px: int, overlap_px: int = 0,
                       batch_size: int = 4) -> np.ndarray:
    """H×W class-id map for a whole tile."""
    image = to_unit(read_image(tile))
    return predict_scores(model, image, patch_px, overlap_px, batch_size).argmax(0).astype(np.int64)


def evaluate_tiles(model, tiles: Iterable[TileRecord], nomenclature: ClassNomenclature,
                   patch_px: int, overlap_px: int = 0) -> ConfusionMatrix:
    cm = ConfusionMatrix.zeros(nomenclature.num_classes)
    for tile in tiles:
        pred = stitched_inference(model, tile, patch_px, overlap_px)
        gt = read_labels(tile, nomenclature)
        cm = cm + accumulate_confusion(pred, gt, nomenclature.void_ids, nomenclature.num_classes)
    return cm


# --- rendering ---

def render_map(labels: np.ndarray, nomenclature: ClassNomenclature) -> np.ndarray:
    """Colorize a class-id map; void classes are drawn black."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= nomenclature.num_classes):
        raise ValueError(f"class id outside the nomenclature (0..{nomenclature.num_classes - 1})")
    palette = nomenclature.palette.copy()
    for v in nomenclature.void_ids:
        palette[v] = 0
    return palette[labels]


def colors_to_labels(rgb: np.ndarray, nomenclature: ClassNomenclature) -> np.ndarray:
    """Inverse of ``render_map`` for images using nomenclature colors only."""
    palette = nomenclature.palette.astype(np.int64)
    keys = palette[:, 0] << 16 | palette[:, 1] << 8 | palette[:, 2]
    if len(set(keys.tolist())) != len(keys):
        raise ValueError("nomenclature colors are not unique")
    rgb = np.asarray(rgb).astype(np.int64)
    flat = rgb[..., 0] << 16 | rgb[..., 1] << 8 | rgb[..., 2]
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], flat)
    pos = np.clip(pos, 0, len(keys) - 1)
    found = keys[order][pos] == flat
    if not found.all():
        raise ValueError("image contains colors outside the nomenclature")
    return order[pos]


def save_prediction(labels: np.ndarray, nomenclature: ClassNomenclature, out_dir: str | os.PathLike,
                    name: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    index_path = out_dir / f"{name}_labels.png"
    color_path = out_dir / f"{name}_color.png"
    save_png(labels.astype(np.uint8), index_path)
    save_png(render_map(labels, nomenclature), color_path)
    return color_path, index_path
