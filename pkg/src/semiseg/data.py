"""Tile inventory, class nomenclature, patch sampling and dataset subsampling."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("labeled_train", "unlabeled_train", "test")

MANIFEST_COLUMNS = (
    "tile_id",
    "image_path",
    "label_path",
    "region",
    "split",
    "width_px",
    "height_px",
    "resolution_cm_per_px",
)
# optional columns used by non-materialized sub-tiles
WINDOW_COLUMNS = ("window_row", "window_col")

# (region, number of 10000 px tiles, split) for the full MiniFrance release
MINIFRANCE_REGIONS = (
    ("Nice", 170, "labeled_train"),
    ("Nantes, Saint-Nazaire", 226, "labeled_train"),
    ("Le Mans", 107, "unlabeled_train"),
    ("Brest", 88, "unlabeled_train"),
    ("Lorient", 68, "unlabeled_train"),
    ("Caen", 126, "unlabeled_train"),
    ("Dunkerque, Calais, Boulogne-sur-Mer", 150, "unlabeled_train"),
    ("Saint-Brieuc", 71, "unlabeled_train"),
    ("Marseille, Martigues", 162, "test"),
    ("Rennes", 196, "test"),
    ("Angers", 123, "test"),
    ("Quimper", 79, "test"),
    ("Vannes", 73, "test"),
    ("Clermont-Ferrand", 150, "test"),
    ("Lille, Arras, Lens, Douai, Henin", 275, "test"),
    ("Cherbourg", 57, "test"),
)


class ManifestError(ValueError):
    """Raised when a manifest or nomenclature fails validation."""


@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassNomenclature:
    entries: tuple[ClassEntry, ...]
    void_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ManifestError(f"class ids must be contiguous from 0, got {ids}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ManifestError("class names must be unique")
        if not set(self.void_ids) <= set(ids):
            raise ManifestError(f"void ids {sorted(self.void_ids)} not among class ids")
        for e in self.entries:
            if len(e.color) != 3 or not all(0 <= c <= 255 for c in e.color):
                raise ManifestError(f"bad color for class {e.id}: {e.color}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def palette(self) -> np.ndarray:
        """(C, 3) uint8 color table indexed by class id."""
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    @classmethod
    def from_dict(cls, obj) -> "ClassNomenclature":
        if isinstance(obj, list):
            obj = {"classes": obj, "void_ids": []}
        try:
            entries = tuple(
                ClassEntry(int(c["id"]), str(c["name"]), tuple(int(v) for v in c["color"]))
                for c in obj["classes"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed nomenclature: {exc}") from exc
        return cls(entries, frozenset(int(v) for v in obj.get("void_ids", [])))

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": e.id, "name": e.name, "color": list(e.color)} for e in self.entries],
            "void_ids": sorted(self.void_ids),
        }


def load_nomenclature(path: str | os.PathLike) -> ClassNomenclature:
    with open(path) as f:
        return ClassNomenclature.from_dict(json.load(f))


@lru_cache(maxsize=None)
def default_nomenclature() -> ClassNomenclature:
    """The 15 MiniFrance land-use classes; id 14 (clouds/shadows/no data) is void."""
    text = resources.files("semiseg.resources").joinpath("minifrance_nomenclature.json").read_text()
    return ClassNomenclature.from_dict(json.loads(text))


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    image_path: str
    label_path: Optional[str]
    region: str
    split: str
    width_px: int
    height_px: int
    resolution_cm_per_px: float = 50.0
    # (row, col) offset of a crop inside the source rasters; None means the whole raster
    window: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"{self.tile_id}: unknown split {self.split!r}")
        if self.split == "labeled_train" and not self.label_path:
            raise ManifestError(f"{self.tile_id}: labeled_train record without label_path")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ManifestError(f"{self.tile_id}: tile dimensions must be positive")
        if self.resolution_cm_per_px <= 0:
            raise ManifestError(f"{self.tile_id}: resolution must be positive")

    @property
    def has_labels(self) -> bool:
        return bool(self.label_path)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px


@dataclass(frozen=True)
class SplitManifest:
    records: tuple[TileRecord, ...]
    nomenclature: ClassNomenclature = field(default_factory=default_nomenclature)

    def __post_init__(self):
        counts = Counter(r.tile_id for r in self.records)
        dupes = sorted(t for t, n in counts.items() if n > 1)
        if dupes:
            raise ManifestError(f"duplicate tile_id(s): {dupes[:5]}")
        region_split: dict[str, str] = {}
        for r in self.records:
            prev = region_split.setdefault(r.region, r.split)
            if prev != r.split:
                raise ManifestError(
                    f"region {r.region!r} assigned to both {prev!r} and {r.split!r}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_split(self, split: str) -> list[TileRecord]:
        return [r for r in self.records if r.split == split]

    def by_region(self) -> "OrderedDict[str, list[TileRecord]]":
        groups: OrderedDict[str, list[TileRecord]] = OrderedDict()
        for r in self.records:
            groups.setdefault(r.region, []).append(r)
        return groups

    @property
    def regions(self) -> list[str]:
        return list(self.by_region())

    def region_split(self) -> dict[str, str]:
        return {r.region: r.split for r in self.records}

    def replace(self, records: Iterable[TileRecord]) -> "SplitManifest":
        return SplitManifest(tuple(records), self.nomenclature)


# --- manifest I/O ---

def _parse_row(row: dict, base: Path, lineno: int) -> TileRecord:
    missing = [c for c in MANIFEST_COLUMNS if c not in row]
    if missing:
        raise ManifestError(f"row {lineno}: missing column(s) {missing}")

    def resolve(p):
        if p is None or str(p).strip() == "":
            return None
        p = Path(str(p).strip())
        return str(p if p.is_absolute() else base / p)

    window = None
    wr, wc = row.get("window_row"), row.get("window_col")
    try:
        if wr not in (None, "") and wc not in (None, ""):
            window = (int(wr), int(wc))
        return TileRecord(
            tile_id=str(row["tile_id"]).strip(),
            image_path=resolve(row["image_path"]),
            label_path=resolve(row["label_path"]),
            region=str(row["region"]).strip(),
            split=str(row["split"]).strip(),
            width_px=int(row["width_px"]),
            height_px=int(row["height_px"]),
            resolution_cm_per_px=float(row["resolution_cm_per_px"]),
            window=window,
        )
    except ManifestError as exc:
        raise ManifestError(f"row {lineno}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"row {lineno}: malformed value ({exc})") from None


def load_manifest(
    path: str | os.PathLike,
    nomenclature: Optional[ClassNomenclature] = None,
    check_rasters: bool = False,
) -> SplitManifest:
    """Read a CSV or JSON-lines tile manifest and validate it.

    Relative raster paths are resolved against the manifest's directory.
    With ``check_rasters`` the raster headers are opened to confirm the
    declared dimensions and image/label agreement.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    if path.suffix.lower() in (".jsonl", ".json", ".ndjson"):
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"row {lineno}: invalid JSON ({exc})") from None
                records.append(_parse_row(row, base, lineno))
    else:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for lineno, row in enumerate(reader, 2):
                if None in row:
                    raise ManifestError(f"row {lineno}: too many fields")
                records.append(_parse_row(row, base, lineno))
    manifest = SplitManifest(tuple(records), nomenclature or default_nomenclature())
    if check_rasters:
        for r in manifest:
            _check_raster_dims(r)
    return manifest


def save_manifest(manifest: SplitManifest, path: str | os.PathLike) -> None:
    """Write a manifest as CSV (or JSON-lines for ``.jsonl``), paths relative where possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p):
        if not p:
            return ""
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    rows = []
    for r in manifest:
        row = {
            "tile_id": r.tile_id,
            "image_path": rel(r.image_path),
            "label_path": rel(r.label_path),
            "region": r.region,
            "split": r.split,
            "width_px": r.width_px,
            "height_px": r.height_px,
            "resolution_cm_per_px": r.resolution_cm_per_px,
            "window_row": r.window[0] if r.window else "",
            "window_col": r.window[1] if r.window else "",
        }
        rows.append(row)
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
    else:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS + WINDOW_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)


def _check_raster_dims(r: TileRecord) -> None:
    def size_of(p):
        try:
            with Image.open(p) as im:
                return im.size[1], im.size[0]
        except OSError as exc:
            raise ManifestError(f"{r.tile_id}: unreadable raster {p} ({exc})") from None

    img = size_of(r.image_path)
    if r.label_path and size_of(r.label_path) != img:
        raise ManifestError(f"{r.tile_id}: image and label dimensions differ")
    if r.window is None and img != r.shape:
        raise ManifestError(f"{r.tile_id}: declared size {r.shape} but raster is {img}")


# --- raster access ---

def _read_raster(path: str, mode: str) -> np.ndarray:
    return _raster_cache(path, mode)


def configure_raster_cache(max_rasters: int) -> None:
    """Set how many decoded rasters stay in memory (full 10000 px tiles are 300 MB each)."""
    global _raster_cache
    _raster_cache = lru_cache(maxsize=max_rasters)(_decode_raster)


def _decode_raster(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if mode == "RGB":
                arr = np.asarray(im.convert("RGB"))
            else:
                if im.mode not in ("L", "P", "I", "I;16"):
                    raise ValueError(f"label raster must be single-channel, got mode {im.mode}")
                arr = np.asarray(im)
    except OSError as exc:
        raise OSError(f"unreadable raster {path}: {exc}") from exc
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


_raster_cache = lru_cache(maxsize=8)(_decode_raster)


def _crop(arr: np.ndarray, r: TileRecord, row: int, col: int, h: int, w: int) -> np.ndarray:
    if r.window is not None:
        row += r.window[0]
        col += r.window[1]
    out = arr[row:row + h, col:col + w]
    if out.shape[:2] != (h, w):
        raise ValueError(f"{r.tile_id}: window ({row},{col},{h},{w}) exceeds raster {arr.shape[:2]}")
    return out


def read_image(r: TileRecord, row: int = 0, col: int = 0,
               height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    """Return the 8-bit RGB pixels of a tile (or a window of it) as H×W×3 uint8."""
    h = r.height_px - row if height is None else height
    w = r.width_px - col if width is None else width
    return _crop(_read_raster(r.image_path, "RGB"), r, row, col, h, w)


def remap_labels(labels: np.ndarray, nomenclature: ClassNomenclature) -> np.ndarray:
    """Map out-of-range label indices onto the void class (with a warning)."""
    labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= nomenclature.num_classes)
    if bad.any():
        if not nomenclature.void_ids:
            raise ValueError("label raster contains unknown class ids and no void class is defined")
        void = min(nomenclature.void_ids)
        logger.warning("remapping %d pixels with unknown class ids to void (%d)", int(bad.sum()), void)
        labels = np.where(bad, void, labels)
    return labels


def read_labels(r: TileRecord, nomenclature: ClassNomenclature, row: int = 0, col: int = 0,
                height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    if not r.label_path:
        raise ValueError(f"{r.tile_id} has no label raster")
    h = r.height_px - row if height is None else height
    w = r.width_px - col if width is None else width
    return remap_labels(_crop(_read_raster(r.label_path, "L"), r, row, col, h, w), nomenclature)


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Inverse of ``to_unit`` for values produced from 8-bit sources."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(array: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


# --- patches ---

@dataclass
class Patch:
    image: np.ndarray  # H×W×3 float32 in [0, 1]
    labels: Optional[np.ndarray]  # H×W int64 class ids
    source_tile: str
    origin: tuple[int, int]


def worker_rng(base_seed: int, worker_index: int = 0, epoch: int = 0,
               stream: int = 0) -> np.random.Generator:
    """Random stream for one data-loading worker in one epoch.

    ``stream`` separates independent draws (e.g. labeled and unlabeled
    samples) so that disabling one leaves the other unchanged.
    """
    return np.random.default_rng(
        np.random.SeedSequence([int(base_seed), int(worker_index), int(epoch), int(stream)])
    )


def sample_origin(tile: TileRecord, size_px: int, rng: np.random.Generator) -> tuple[int, int]:
    if size_px <= 0:
        raise ValueError("patch size must be positive")
    if size_px > min(tile.width_px, tile.height_px):
        raise ValueError(
            f"patch size {size_px} exceeds tile {tile.tile_id} ({tile.height_px}x{tile.width_px})"
        )
    row = int(rng.integers(0, tile.height_px - size_px + 1))
    col = int(rng.integers(0, tile.width_px - size_px + 1))
    return row, col


def load_patch(tile: TileRecord, origin: tuple[int, int], size_px: int,
               nomenclature: Optional[ClassNomenclature] = None) -> Patch:
    row, col = origin
    image = to_unit(read_image(tile, row, col, size_px, size_px))
    labels = None
    if tile.has_labels:
        labels = read_labels(tile, nomenclature or default_nomenclature(), row, col, size_px, size_px)
        if labels.shape != image.shape[:2]:
            raise ValueError(f"{tile.tile_id}: label and image windows differ")
    return Patch(image, labels, tile.tile_id, (row, col))


def sample_patch(tile: TileRecord, size_px: int, rng: np.random.Generator,
                 nomenclature: Optional[ClassNomenclature] = None) -> Patch:
    """Crop a square patch at a uniformly random valid position."""
    return load_patch(tile, sample_origin(tile, size_px, rng), size_px, nomenclature)


# --- tinyMiniFrance-style subsampling ---

def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Ties in the fractional parts go to the earlier index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    # exact rational quotas for integer weights
    if np.all(w == np.round(w)):
        wi = [int(v) for v in w]
        s = sum(wi)
        base = [total * v // s for v in wi]
        rem = [total * v - b * s for v, b in zip(wi, base)]
    else:
        q = w / w.sum() * total
        base = [int(np.floor(v)) for v in q]
        rem = [float(v - b) for v, b in zip(q, base)]
    left = total - sum(base)
    order = sorted(range(len(base)), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def subsample_tiny(
    manifest: SplitManifest,
    target_count: int,
    subtile_px: int,
    rng: np.random.Generator,
    out_dir: Optional[str | os.PathLike] = None,
    materialize: bool = True,
) -> SplitManifest:
    """Draw ``target_count`` square sub-tiles, at least one from every tile.

    Per-region counts follow the region's share of tiles (largest-remainder
    rounding). Inside a region the extra sub-tiles go to uniformly drawn
    tiles and every position is uniform, so sub-tiles may overlap. When
    ``materialize`` is set the crops are written as PNG files under
    ``out_dir``; otherwise records point at the source rasters with a window.
    """
    n_tiles = len(manifest)
    if n_tiles == 0:
        raise ValueError("empty manifest")
    if target_count < n_tiles:
        raise ValueError(f"target_count {target_count} is smaller than the tile count {n_tiles}")
    too_small = [r.tile_id for r in manifest if subtile_px > min(r.width_px, r.height_px)]
    if subtile_px <= 0 or too_small:
        raise ValueError(f"subtile size {subtile_px} exceeds tile(s) {too_small[:5]}")
    if materialize and out_dir is None:
        raise ValueError("materialize=True needs an out_dir")

    groups = manifest.by_region()
    regions = list(groups)
    quotas = largest_remainder([len(groups[g]) for g in regions], target_count)

    out_records = []
    for region, quota in zip(regions, quotas):
        tiles = groups[region]
        per_tile = np.ones(len(tiles), dtype=np.int64)
        extra = quota - len(tiles)
        if extra > 0:
            per_tile += np.bincount(rng.integers(0, len(tiles), size=extra), minlength=len(tiles))
        for tile, n in zip(tiles, per_tile):
            for k in range(int(n)):
                origin = sample_origin(tile, subtile_px, rng)
                out_records.append(_make_subtile(tile, k, origin, subtile_px, manifest.nomenclature,
                                                 out_dir, materialize))
    return manifest.replace(out_records)


def subtile_id(tile_id: str, k: int) -> str:
    return f"{tile_id}__{k:04d}"


def _make_subtile(tile, k, origin, size, nomenclature, out_dir, materialize) -> TileRecord:
    sid = subtile_id(tile.tile_id, k)
    if not materialize:
        base = tile.window or (0, 0)
        return dataclasses.replace(tile, tile_id=sid, width_px=size, height_px=size,
                                   window=(base[0] + origin[0], base[1] + origin[1]))
    out_dir = Path(out_dir)
    image_path = out_dir / "images" / f"{sid}.png"
    save_png(read_image(tile, origin[0], origin[1], size, size), image_path)
    label_path = None
    if tile.has_labels:
        label_path = out_dir / "labels" / f"{sid}.png"
        labels = read_labels(tile, nomenclature, origin[0], origin[1], size, size)
        save_png(labels.astype(np.uint8), label_path)
    return dataclasses.replace(tile, tile_id=sid, image_path=str(image_path),
                               label_path=str(label_path) if label_path else None,
                               width_px=size, height_px=size, window=None)


# --- class statistics ---

def label_counts(record: TileRecord, nomenclature: ClassNomenclature) -> np.ndarray:
    """Exact per-class pixel counts of one labeled tile."""
    labels = read_labels(record, nomenclature)
    return np.bincount(labels.ravel(), minlength=nomenclature.num_classes).astype(np.int64)


def class_histogram(manifest: SplitManifest, group_by: str = "region") -> dict[str, np.ndarray]:
    """Per-class pixel fractions (indexed by class id) for each region or split."""
    if group_by not in ("region", "split"):
        raise ValueError(f"group_by must be 'region' or 'split', not {group_by!r}")
    counts: OrderedDict[str, np.ndarray] = OrderedDict()
    for r in manifest:
        key = r.region if group_by == "region" else r.split
        if not r.has_labels:
            counts.setdefault(key, None)
            continue
        c = label_counts(r, manifest.nomenclature)
        counts[key] = c if counts.get(key) is None else counts[key] + c
    out = OrderedDict()
    for key, c in counts.items():
        if c is None or c.sum() == 0:
            raise ValueError(f"group {key!r} contains no labeled record")
        out[key] = c / c.sum()
    return out
