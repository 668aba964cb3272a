"""Dataset representativeness: appearance embedding, density surfaces and coverage scores.

Tiles are encoded by a CNN (an ONNX file), embedded in 2D with t-SNE, and
each region's point cloud is turned into a rasterized one-class SVM support
region. Regions and splits are then compared by IoU and by IoT, the share of
the second (target) region covered by the first.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.spatial.distance import pdist
from sklearn.manifold import TSNE
from sklearn.svm import OneClassSVM

from .data import SPLITS, SplitManifest, TileRecord, class_histogram, label_counts, read_image, save_png

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BBOX_MARGIN = 0.10


@dataclass
class FeatureMatrix:
    vectors: np.ndarray  # (T, D)
    tile_ids: list
    regions: list

    def __post_init__(self):
        if not (len(self.vectors) == len(self.tile_ids) == len(self.regions)):
            raise ValueError("feature rows, tile ids and regions must align")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite feature values")


@dataclass
class EmbeddedPoints:
    coords: np.ndarray  # (T, 2)
    tile_ids: list
    regions: list

    def select(self, regions: Sequence[str]) -> "EmbeddedPoints":
        keep = [i for i, r in enumerate(self.regions) if r in set(regions)]
        return EmbeddedPoints(self.coords[keep], [self.tile_ids[i] for i in keep],
                              [self.regions[i] for i in keep])


# --- features ---

def export_torchvision_encoder(path: str | os.PathLike, name: str = "resnet34", weights=None,
                               input_px: int = 224) -> Path:
    """Write a torchvision classification backbone (minus its classifier) as ONNX.

    ``weights`` is passed to torchvision (e.g. ``"IMAGENET1K_V1"``); ``None``
    gives random initialization, which is enough for pipeline tests.
    """
    import torch
    import torchvision

    net = getattr(torchvision.models, name)(weights=weights)
    if name.startswith("resnet"):
        body = torch.nn.Sequential(*list(net.children())[:-2])
    elif name.startswith("vgg"):
        body = net.features
    else:
        raise ValueError(f"unsupported encoder {name!r}")
    body.eval()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # the TorchScript exporter needs no extra packages; its deprecation notice is not actionable here
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        torch.onnx.export(body, torch.zeros(1, 3, input_px, input_px), str(path), input_names=["input"],
                          output_names=["features"], dynamic_axes={"input": {0: "batch"}, "features": {0: "batch"}},
                          dynamo=False)
    return path


def _encoder_input(tile: TileRecord, input_px: int) -> np.ndarray:
    img = Image.fromarray(np.asarray(read_image(tile))).resize((input_px, input_px), Image.BILINEAR)
    x = np.asarray(img, dtype=np.float32) / 255.0
    x = (x - np.asarray(IMAGENET_MEAN, np.float32)) / np.asarray(IMAGENET_STD, np.float32)
    return x.transpose(2, 0, 1)


def extract_features(tiles: Sequence[TileRecord], encoder_path: str | os.PathLike, pool: str = "global_average",
                     input_px: int = 224, batch_size: int = 16) -> FeatureMatrix:
    """One pooled feature vector per tile from the final stage of an ONNX encoder."""
    import onnxruntime as ort

    if pool != "global_average":
        raise ValueError(f"unsupported pooling {pool!r}")
    if not Path(encoder_path).is_file():
        raise FileNotFoundError(f"encoder not found: {encoder_path}")
    opts = ort.SessionOptions()
    opts.intra_op_num_threads = 1
    opts.inter_op_num_threads = 1
    try:
        session = ort.InferenceSession(str(encoder_path), opts, providers=["CPUExecutionProvider"])
    except Exception as exc:  # onnxruntime raises its own exception types
        raise ValueError(f"cannot load encoder {encoder_path}: {exc}") from exc
    input_name = session.get_inputs()[0].name
    rows = []
    for i in range(0, len(tiles), batch_size):
        batch = np.stack([_encoder_input(t, input_px) for t in tiles[i:i + batch_size]])
        out = session.run(None, {input_name: batch})[0]
        if out.ndim == 4:
            out = out.mean(axis=(2, 3))
        rows.append(out.reshape(len(batch), -1).astype(np.float64))
    vectors = np.concatenate(rows) if rows else np.zeros((0, 0))
    return FeatureMatrix(vectors, [t.tile_id for t in tiles], [t.region for t in tiles])


# --- embedding ---

def embed_2d(features: FeatureMatrix, perplexity: float = 30.0, seed: int = 0, n_iter: int = 1000) -> EmbeddedPoints:
    """t-SNE to 2D; identical output for identical input and seed."""
    t = len(features.vectors)
    if t <= 3 * perplexity:
        raise ValueError(f"t-SNE with perplexity {perplexity} needs more than {3 * perplexity:g} points, got {t}")
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=n_iter, init="pca",
                random_state=seed, n_jobs=1)
    coords = tsne.fit_transform(np.asarray(features.vectors, dtype=np.float64))
    return EmbeddedPoints(coords, list(features.tile_ids), list(features.regions))


# --- appearance surfaces ---

@dataclass
class AppearanceSurface:
    mask: np.ndarray  # (G, G) bool, rows along y, columns along x
    bbox: tuple  # (xmin, ymin, xmax, ymax)
    grid_resolution: int
    # fitted estimators whose support union is this surface; enables exact re-rasterization
    estimators: tuple = field(default=(), repr=False)

    @property
    def area_cells(self) -> int:
        return int(self.mask.sum())

    def cell_centers(self):
        return grid_centers(self.bbox, self.grid_resolution)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Whether each point falls in a mask cell (False outside the bbox)."""
        points = np.asarray(points, dtype=np.float64)
        xmin, ymin, xmax, ymax = self.bbox
        g = self.grid_resolution
        col = np.floor((points[:, 0] - xmin) / (xmax - xmin) * g).astype(int)
        row = np.floor((points[:, 1] - ymin) / (ymax - ymin) * g).astype(int)
        inside = (col >= 0) & (col < g) & (row >= 0) & (row < g)
        out = np.zeros(len(points), dtype=bool)
        out[inside] = self.mask[row[inside], col[inside]]
        return out


def grid_centers(bbox, g: int):
    xmin, ymin, xmax, ymax = bbox
    xs = xmin + (np.arange(g) + 0.5) * (xmax - xmin) / g
    ys = ymin + (np.arange(g) + 0.5) * (ymax - ymin) / g
    return xs, ys


def points_bbox(points: np.ndarray, margin: float = BBOX_MARGIN) -> tuple:
    lo, hi = points.min(0), points.max(0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, hi = lo - margin * span, hi + margin * span
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def _rasterize(estimators, bbox, g) -> np.ndarray:
    xs, ys = grid_centers(bbox, g)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    mask = np.zeros(len(grid), dtype=bool)
    for est in estimators:
        mask |= est.decision_function(grid) >= 0
    return mask.reshape(g, g)


def default_gamma(points: np.ndarray) -> float:
    """1 / (2 * median pairwise squared distance)."""
    d2 = pdist(points, "sqeuclidean")
    med = float(np.median(d2))
    if med <= 0:
        raise ValueError("degenerate point set: median pairwise distance is zero")
    return 1.0 / (2.0 * med)


def fit_appearance_surface(points, grid_resolution: int = 512, nu: float = 0.1, gamma: Optional[float] = None,
                           bbox: Optional[tuple] = None) -> AppearanceSurface:
    """Rasterized support region of an RBF one-class SVM fitted to 2D points.

    Without ``bbox`` the grid spans the points plus a 10% margin per side.
    """
    pts = np.asarray(points.coords if isinstance(points, EmbeddedPoints) else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of points")
    if len(pts) < 5:
        raise ValueError(f"need at least 5 points to fit a surface, got {len(pts)}")
    if np.all(pts == pts[0]):
        raise ValueError("degenerate point set: all points identical")
    if gamma is None:
        gamma = default_gamma(pts)
    est = OneClassSVM(kernel="rbf", nu=nu, gamma=gamma).fit(pts)
    if bbox is None:
        bbox = points_bbox(pts)
    mask = _rasterize((est,), bbox, grid_resolution)
    if not mask.any():
        raise ValueError("fitted surface is empty on the grid; increase grid_resolution")
    return AppearanceSurface(mask, tuple(float(v) for v in bbox), grid_resolution, (est,))


def resample(surface: AppearanceSurface, bbox: tuple, grid_resolution: int) -> AppearanceSurface:
    """Surface on another grid: exact for fitted surfaces, nearest-cell otherwise."""
    bbox = tuple(float(v) for v in bbox)
    if surface.bbox == bbox and surface.grid_resolution == grid_resolution:
        return surface
    if surface.estimators:
        mask = _rasterize(surface.estimators, bbox, grid_resolution)
    else:
        xs, ys = grid_centers(bbox, grid_resolution)
        gx, gy = np.meshgrid(xs, ys)
        mask = surface.contains(np.column_stack([gx.ravel(), gy.ravel()])).reshape(grid_resolution, grid_resolution)
    return AppearanceSurface(mask, bbox, grid_resolution, surface.estimators)


def union_bbox(*surfaces: AppearanceSurface) -> tuple:
    b = np.array([s.bbox for s in surfaces])
    return float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max())


def align(s1: AppearanceSurface, s2: AppearanceSurface):
    if s1.bbox == s2.bbox and s1.grid_resolution == s2.grid_resolution:
        return s1.mask, s2.mask
    bbox = union_bbox(s1, s2)
    g = max(s1.grid_resolution, s2.grid_resolution)
    return resample(s1, bbox, g).mask, resample(s2, bbox, g).mask


def union_surface(surfaces: Sequence[AppearanceSurface]) -> AppearanceSurface:
    if not surfaces:
        raise ValueError("no surfaces to combine")
    bbox = union_bbox(*surfaces)
    g = max(s.grid_resolution for s in surfaces)
    mask = np.zeros((g, g), dtype=bool)
    estimators = ()
    for s in surfaces:
        mask |= resample(s, bbox, g).mask
        estimators += s.estimators
    if not all(s.estimators for s in surfaces):
        estimators = ()
    return AppearanceSurface(mask, bbox, g, estimators)


def iou_surface(s1: AppearanceSurface, s2: AppearanceSurface) -> float:
    """|S1 ∩ S2| / |S1 ∪ S2| by cell counting."""
    a, b = align(s1, s2)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise ValueError("both surfaces are empty")
    return int(np.count_nonzero(a & b)) / union


def iot_surface(s1: AppearanceSurface, s2: AppearanceSurface) -> float:
    """|S1 ∩ S2| / |S2|: how much of the target ``s2`` is covered by ``s1``."""
    a, b = align(s1, s2)
    target = int(np.count_nonzero(b))
    if target == 0:
        raise ValueError("target surface is empty")
    return int(np.count_nonzero(a & b)) / target


# --- report ---

@dataclass
class AnalysisParams:
    perplexity: float = 30.0
    n_iter: int = 1000
    nu: float = 0.1
    gamma: Optional[float] = None
    grid_resolution: int = 512
    seed: int = 0
    input_px: int = 224

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown analysis option(s): {sorted(unknown)}")
        return cls(**d)


TRAIN_UNION = "train (union)"
TEST_UNION = "test (union)"


@dataclass
class CoverageReport:
    features: FeatureMatrix
    embedding: EmbeddedPoints
    bbox: tuple
    region_surfaces: dict
    split_surfaces: dict
    row_labels: list
    col_labels: list
    iou: np.ndarray
    iot: np.ndarray
    split_scores: dict
    class_histograms: dict
    class_presence: dict  # tile_id -> per-class pixel fractions
    class_names: list


def _score_matrix(rows, cols, fn):
    return np.array([[fn(a, b) for b in cols] for a in rows], dtype=np.float64)


def coverage_report(manifest: SplitManifest, encoder_path, params: Optional[AnalysisParams] = None) -> CoverageReport:
    """Run features → embedding → surfaces → scores for a whole manifest.

    Every region and split is fitted on one common grid spanning all points.
    Matrix rows are the regions then the union of training splits; columns are
    the regions then the union of test regions.
    """
    params = params or AnalysisParams()
    tiles = list(manifest.records)
    feats = extract_features(tiles, encoder_path, input_px=params.input_px)
    emb = embed_2d(feats, params.perplexity, params.seed, params.n_iter)
    bbox = points_bbox(emb.coords)
    g = params.grid_resolution

    regions = manifest.regions
    region_split = manifest.region_split()
    surfaces = {r: fit_appearance_surface(emb.select([r]), g, params.nu, params.gamma, bbox) for r in regions}

    split_surfaces = {}
    for split in SPLITS:
        members = [surfaces[r] for r in regions if region_split[r] == split]
        if members:
            split_surfaces[split] = union_surface(members)
    train_members = [surfaces[r] for r in regions if region_split[r] != "test"]
    if train_members:
        split_surfaces["train"] = union_surface(train_members)

    rows = [surfaces[r] for r in regions]
    cols = [surfaces[r] for r in regions]
    row_labels, col_labels = list(regions), list(regions)
    if "train" in split_surfaces:
        rows.append(split_surfaces["train"])
        row_labels.append(TRAIN_UNION)
    if "test" in split_surfaces:
        cols.append(split_surfaces["test"])
        col_labels.append(TEST_UNION)
    iou = _score_matrix(rows, cols, iou_surface)
    iot = _score_matrix(rows, cols, iot_surface)

    split_scores = {}
    if "test" in split_surfaces:
        for split in ("labeled_train", "unlabeled_train", "train"):
            if split in split_surfaces:
                split_scores[split] = {
                    "iou": iou_surface(split_surfaces[split], split_surfaces["test"]),
                    "iot": iot_surface(split_surfaces[split], split_surfaces["test"]),
                }

    labeled = manifest.replace([t for t in tiles if t.has_labels])
    histograms = class_histogram(labeled, "region") if len(labeled) else {}
    presence = {}
    for t in labeled:
        c = label_counts(t, manifest.nomenclature)
        presence[t.tile_id] = c / c.sum()

    return CoverageReport(feats, emb, bbox, surfaces, split_surfaces, row_labels, col_labels, iou, iot,
                          split_scores, histograms, presence, manifest.nomenclature.names)


def _heatmap(matrix, rows, cols, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(cols), 1 + 0.5 * len(rows)))
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(cols)), cols, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(len(rows)), rows, fontsize=7)
    for i in range(len(rows)):
        for j in range(len(cols)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=6,
                    color="white" if matrix[i, j] > 0.6 else "black")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _presence_scatter(coords, values, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(coords[:, 0], coords[:, 1], c=values, cmap="Greys", vmin=0, vmax=1, s=8, edgecolors="none")
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(report: CoverageReport, out_dir: str | os.PathLike) -> Path:
    """Write CSV/JSON tables, heatmaps, surface masks and class-presence plots."""
    out = Path(out_dir)
    (out / "surfaces").mkdir(parents=True, exist_ok=True)
    emb = report.embedding
    with open(out / "embeddings.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_id", "region", "x", "y"])
        for tid, reg, (x, y) in zip(emb.tile_ids, emb.regions, emb.coords):
            w.writerow([tid, reg, repr(float(x)), repr(float(y))])
    for name, mat in (("iou", report.iou), ("iot", report.iot)):
        (out / f"{name}.json").write_text(json.dumps(
            {"rows": report.row_labels, "cols": report.col_labels, "scores": mat.tolist()}, indent=2))
        _heatmap(mat, report.row_labels, report.col_labels, name.upper(), out / f"{name}.png")
    (out / "split_scores.json").write_text(json.dumps(report.split_scores, indent=2))
    (out / "surfaces" / "bbox.json").write_text(json.dumps({"bbox": report.bbox}))
    for i, (region, s) in enumerate(report.region_surfaces.items()):
        save_png((s.mask[::-1] * 255).astype(np.uint8), out / "surfaces" / f"region_{i:02d}.png")
    for split, s in report.split_surfaces.items():
        save_png((s.mask[::-1] * 255).astype(np.uint8), out / "surfaces" / f"split_{split}.png")
    (out / "surfaces" / "index.json").write_text(json.dumps(
        {f"region_{i:02d}.png": r for i, r in enumerate(report.region_surfaces)}, indent=2))
    (out / "class_histograms.json").write_text(json.dumps(
        {g: dict(zip(report.class_names, map(float, h))) for g, h in report.class_histograms.items()}, indent=2))
    if report.class_presence:
        with open(out / "class_presence.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["tile_id"] + report.class_names)
            for tid, frac in report.class_presence.items():
                w.writerow([tid] + [repr(float(v)) for v in frac])
        index = {t: i for i, t in enumerate(emb.tile_ids)}
        tids = list(report.class_presence)
        coords = emb.coords[[index[t] for t in tids]]
        fracs = np.stack([report.class_presence[t] for t in tids])
        for k, name in enumerate(report.class_names):
            if fracs[:, k].any():
                _presence_scatter(coords, fracs[:, k], name, out / f"presence_class_{k:02d}.png")
    return out
