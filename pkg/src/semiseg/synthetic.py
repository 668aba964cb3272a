"""Synthetic tiled datasets with region-dependent appearance shifts.

Label maps are smooth random blobs over a few classes. Each class has a
base color and a texture (flat, speckled or striped); each region applies its
own color gain/bias, so regions share semantics but not appearance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import ClassEntry, ClassNomenclature, SplitManifest, TileRecord, save_manifest, save_png


SYNTHETIC_NOMENCLATURE = ClassNomenclature(
    (
        ClassEntry(0, "crops", (230, 230, 77)),
        ClassEntry(1, "forest", (0, 166, 0)),
        ClassEntry(2, "urban", (230, 0, 77)),
    ),
    frozenset(),
)

# base colors (0-1) and texture of each class
_CLASS_COLORS = np.array([[0.62, 0.58, 0.35], [0.25, 0.42, 0.22], [0.55, 0.50, 0.52]])
_TEXTURES = ("flat", "speckle", "stripes")


@dataclass
class RegionStyle:
    name: str
    n_tiles: int
    split: str
    gain: Sequence[float] = (1.0, 1.0, 1.0)
    bias: Sequence[float] = (0.0, 0.0, 0.0)
    labeled: Optional[bool] = None  # default: every split except unlabeled_train


def random_label_map(size: int, num_classes: int, rng: np.random.Generator, smoothness: float = 6.0) -> np.ndarray:
    field = rng.standard_normal((num_classes, size, size))
    field = np.stack([gaussian_filter(f, smoothness, mode="wrap") for f in field])
    return field.argmax(0).astype(np.uint8)


def render_tile(labels: np.ndarray, style: RegionStyle, rng: np.random.Generator) -> np.ndarray:
    """RGB uint8 rendering of a label map in the region's appearance."""
    h, w = labels.shape
    img = _CLASS_COLORS[labels].copy()
    rows, cols = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, np.pi)
    stripes = 0.12 * np.sin(0.9 * (rows * np.cos(angle) + cols * np.sin(angle)))
    speckle = rng.normal(0, 0.10, size=(h, w))
    fine = rng.normal(0, 0.02, size=(h, w, 3))
    for k, tex in enumerate(_TEXTURES):
        m = labels == k
        if tex == "speckle":
            img[m] += speckle[m, None]
        elif tex == "stripes":
            img[m] += stripes[m, None]
    img += fine
    img = img * np.asarray(style.gain) + np.asarray(style.bias)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_dataset(out_dir: str | os.PathLike, regions: Sequence[RegionStyle], tile_px: int = 128,
                 seed: int = 0, smoothness: float = 6.0, manifest_name: str = "manifest.csv") -> SplitManifest:
    """Write PNG tiles (and labels) plus a CSV manifest; returns the manifest."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    nom = SYNTHETIC_NOMENCLATURE
    records = []
    for style in regions:
        labeled = style.labeled if style.labeled is not None else style.split != "unlabeled_train"
        slug = style.name.lower().replace(" ", "_")
        for i in range(style.n_tiles):
            tid = f"{slug}_{i:03d}"
            labels = random_label_map(tile_px, nom.num_classes, rng, smoothness)
            image_path = out / "images" / f"{tid}.png"
            save_png(render_tile(labels, style, rng), image_path)
            label_path = None
            if labeled:
                label_path = out / "labels" / f"{tid}.png"
                save_png(labels, label_path)
            records.append(TileRecord(tid, str(image_path), str(label_path) if label_path else None,
                                      style.name, style.split, tile_px, tile_px, 50.0))
    manifest = SplitManifest(tuple(records), nom)
    save_manifest(manifest, out / manifest_name)
    (out / "nomenclature.json").write_text(json.dumps(nom.to_dict(), indent=2))
    return manifest


def trend_regions(n_labeled: int = 10, n_unlabeled: int = 200, n_test: int = 90) -> list[RegionStyle]:
    """One labeled region, shifted unlabeled regions, and test regions resembling the unlabeled ones."""
    u = n_unlabeled // 4
    t = n_test // 3
    return [
        RegionStyle("Alpha", n_labeled, "labeled_train"),
        RegionStyle("Beta", u, "unlabeled_train", gain=(1.15, 0.95, 0.80), bias=(0.05, 0.0, -0.05)),
        RegionStyle("Gamma", u, "unlabeled_train", gain=(0.75, 0.85, 1.10), bias=(-0.05, 0.0, 0.08)),
        RegionStyle("Delta", u, "unlabeled_train", gain=(0.80, 0.80, 0.80), bias=(0.15, 0.15, 0.15)),
        RegionStyle("Epsilon", n_unlabeled - 3 * u, "unlabeled_train", gain=(1.25, 1.20, 1.15), bias=(-0.10, -0.10, -0.10)),
        RegionStyle("Zeta", t, "test", gain=(1.10, 0.95, 0.85), bias=(0.06, 0.0, -0.04)),
        RegionStyle("Eta", t, "test", gain=(0.80, 0.85, 1.05), bias=(-0.04, 0.01, 0.07)),
        RegionStyle("Theta", n_test - 2 * t, "test", gain=(0.85, 0.82, 0.80), bias=(0.12, 0.13, 0.14)),
    ]
