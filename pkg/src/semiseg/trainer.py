"""Pseudo-epoch semi-supervised training, checkpointing and the labeled-data ablation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import SplitManifest, TileRecord, load_patch, sample_origin, worker_rng
from .evaluation import evaluate_tiles, mean_iou, overall_accuracy
from .losses import LossSpec, combined_loss, cross_entropy, unsupervised_loss
from .models import ModelSpec, build_model, check_compatible, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LABELED_STREAM, UNLABELED_STREAM = 0, 1
STATE_FILE = "train_state.pt"
METRICS_FILE = "metrics.jsonl"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_spec: ModelSpec = field(default_factory=ModelSpec)
    loss_spec: LossSpec = field(default_factory=lambda: LossSpec("l1"))
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    pseudo_epochs: int = 150
    labeled_samples_per_epoch: int = 5000
    unlabeled_samples_per_epoch: int = 5000
    patch_px: int = 512
    batch_size: int = 4
    seed: int = 0
    apply_unsup_on_labeled: bool = True
    use_unlabeled: bool = True
    workers: int = 0
    # split evaluated after each pseudo-epoch for best-checkpoint selection
    validation_split: Optional[str] = None
    eval_overlap_px: int = 0
    # restrict the labeled stream to these tiles (ablation); None means all labeled_train tiles
    labeled_tile_ids: Optional[list] = None

    def __post_init__(self):
        if isinstance(self.model_spec, dict):
            self.model_spec = ModelSpec.from_dict(self.model_spec)
        if isinstance(self.loss_spec, dict):
            self.loss_spec = LossSpec.from_dict(self.loss_spec)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ValueError(f"optimizer must be 'adam', got {self.optimizer!r}")
        for name in ("pseudo_epochs", "labeled_samples_per_epoch", "unlabeled_samples_per_epoch",
                     "patch_px", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.workers < 0:
            raise ValueError("workers must be nonnegative")
        check_compatible(self.model_spec, self.loss_spec)

    @property
    def semi_supervised(self) -> bool:
        return self.loss_spec.enabled and self.use_unlabeled

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_spec"] = self.model_spec.to_dict()
        d["loss_spec"] = self.loss_spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    pseudo_epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_miou: Optional[float] = None
    log_path: Optional[Path] = None

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "pseudo_epoch": self.pseudo_epoch,
            "step": self.step,
            "history": self.history,
            "epoch_seconds": self.epoch_seconds,
            "validation": self.validation,
            "best_miou": self.best_miou,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, d: dict) -> None:
        self.optimizer.load_state_dict(d["optimizer"])
        self.pseudo_epoch = d["pseudo_epoch"]
        self.step = d["step"]
        self.history = list(d["history"])
        self.epoch_seconds = list(d["epoch_seconds"])
        self.validation = list(d["validation"])
        self.best_miou = d["best_miou"]
        torch.set_rng_state(d["torch_rng"])


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate)


def new_state(model, config: TrainConfig) -> TrainState:
    return TrainState(make_optimizer(model, config))


# --- sampling ---

def labeled_tiles(manifest: SplitManifest, config: TrainConfig) -> list[TileRecord]:
    tiles = manifest.by_split("labeled_train")
    if config.labeled_tile_ids is not None:
        wanted = set(config.labeled_tile_ids)
        tiles = [t for t in tiles if t.tile_id in wanted]
        missing = wanted - {t.tile_id for t in tiles}
        if missing:
            raise ValueError(f"labeled tile ids not in labeled_train: {sorted(missing)[:5]}")
    return tiles


def _plan(tiles, n_batches, batch_size, patch_px, rng):
    """Tile and crop origin for every sample, drawn up front so loading order cannot matter."""
    plan = []
    for _ in range(n_batches):
        batch = []
        for _ in range(batch_size):
            tile = tiles[int(rng.integers(0, len(tiles)))]
            batch.append((tile, sample_origin(tile, patch_px, rng)))
        plan.append(batch)
    return plan


def _to_tensors(patches, labeled):
    x = torch.from_numpy(np.stack([p.image.transpose(2, 0, 1) for p in patches])).float()
    if not labeled:
        return x, None
    y = torch.from_numpy(np.stack([p.labels for p in patches])).long()
    return x, y


class _Loader:
    def __init__(self, nomenclature, patch_px, workers):
        self.nomenclature = nomenclature
        self.patch_px = patch_px
        self.pool = ThreadPoolExecutor(workers) if workers > 0 else None

    def load(self, batch):
        fn = lambda item: load_patch(item[0], item[1], self.patch_px, self.nomenclature)  # noqa: E731
        if self.pool is None:
            return [fn(item) for item in batch]
        return list(self.pool.map(fn, batch))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


# --- one optimization step ---

def _zero_grads_to_none(model):
    # a parameter whose gradient is exactly zero is left untouched by the step
    for p in model.parameters():
        if p.grad is not None and not p.grad.any():
            p.grad = None


def training_step(model, optimizer, x, y, kind: str, config: TrainConfig, void_ids=()) -> dict:
    """One labeled or unlabeled optimization step; returns the loss record."""
    spec = config.loss_spec
    model.train()
    l_s = l_u = None
    if kind == "labeled":
        if spec.enabled and config.apply_unsup_on_labeled:
            scores, out_u = model(x)
            l_u = unsupervised_loss(x, out_u, spec)
        else:
            scores = model.forward_supervised(x)
        l_s = cross_entropy(scores, y, void_ids)
    else:
        l_u = unsupervised_loss(x, model.forward_unsupervised(x), spec)
    total = combined_loss(l_s, l_u, spec)
    record = {
        "batch_kind": kind,
        "l_s": None if l_s is None else l_s.item(),
        "l_u": None if l_u is None else l_u.item(),
        "total": total.item(),
    }
    if not math.isfinite(record["total"]):
        raise NonFiniteLossError(f"non-finite loss on a {kind} batch: {record}")
    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        _zero_grads_to_none(model)
        if any(p.grad is not None for p in model.parameters()):
            optimizer.step()
    return record


def run_pseudo_epoch(state: TrainState, model, manifest: SplitManifest, config: TrainConfig,
                     on_step: Optional[Callable[[TrainState, dict], None]] = None) -> TrainState:
    """Alternate one labeled and one unlabeled batch until both per-epoch budgets are spent."""
    lab = labeled_tiles(manifest, config)
    if not lab:
        raise ValueError("manifest has no labeled_train tiles")
    unl = manifest.by_split("unlabeled_train") if config.semi_supervised else []
    if config.semi_supervised and not unl:
        raise ValueError("semi-supervised training needs unlabeled_train tiles")

    epoch = state.pseudo_epoch
    bs = config.batch_size
    lab_plan = _plan(lab, math.ceil(config.labeled_samples_per_epoch / bs), bs, config.patch_px,
                     worker_rng(config.seed, 0, epoch, LABELED_STREAM))
    unl_plan = []
    if unl:
        unl_plan = _plan(unl, math.ceil(config.unlabeled_samples_per_epoch / bs), bs, config.patch_px,
                         worker_rng(config.seed, 0, epoch, UNLABELED_STREAM))
    schedule = []
    for i in range(max(len(lab_plan), len(unl_plan))):
        if i < len(lab_plan):
            schedule.append(("labeled", lab_plan[i]))
        if i < len(unl_plan):
            schedule.append(("unlabeled", unl_plan[i]))

    void_ids = manifest.nomenclature.void_ids
    loader = _Loader(manifest.nomenclature, config.patch_px, config.workers)
    lr = state.optimizer.param_groups[0]["lr"]
    start = time.perf_counter()
    log = open(state.log_path, "a") if state.log_path else None
    try:
        for kind, batch in schedule:
            x, y = _to_tensors(loader.load(batch), kind == "labeled")
            try:
                record = training_step(model, state.optimizer, x, y, kind, config, void_ids)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"pseudo-epoch {epoch}, step {state.step + 1}: {exc}") from None
            state.step += 1
            record = {"step": state.step, "pseudo_epoch": epoch, **record, "lr": lr}
            state.history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if on_step:
                on_step(state, record)
    finally:
        loader.close()
        if log:
            log.close()
    state.epoch_seconds.append(time.perf_counter() - start)
    state.pseudo_epoch = epoch + 1
    return state


def fit(config: TrainConfig, manifest: SplitManifest, model=None, state: Optional[TrainState] = None,
        on_step=None):
    """Train in memory (no checkpoints) for ``config.pseudo_epochs``."""
    _check_classes(config, manifest)
    if model is None:
        model = build_model(config.model_spec, config.seed)
    if state is None:
        state = new_state(model, config)
    while state.pseudo_epoch < config.pseudo_epochs:
        run_pseudo_epoch(state, model, manifest, config, on_step)
    return model, state


def _check_classes(config, manifest):
    if config.model_spec.num_classes != manifest.nomenclature.num_classes:
        raise ValueError(
            f"model has {config.model_spec.num_classes} classes, "
            f"nomenclature has {manifest.nomenclature.num_classes}"
        )


# --- checkpointed training ---

@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Optional[Path]
    metrics_log: Path
    state: TrainState
    model: object


def _epoch_dir(root: Path, epoch: int) -> Path:
    return root / "checkpoints" / f"epoch_{epoch:04d}"


def _latest_checkpoint(root: Path) -> Optional[Path]:
    ckpt_root = root / "checkpoints"
    if not ckpt_root.is_dir():
        return None
    done = sorted(d for d in ckpt_root.glob("epoch_*") if (d / STATE_FILE).is_file())
    return done[-1] if done else None


def _save(directory: Path, model, state: TrainState, config: TrainConfig, nomenclature=None) -> None:
    tmp = directory.with_name(directory.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_checkpoint(tmp, model, config.loss_spec, config.seed, state.pseudo_epoch,
                    extra={"step": state.step, "patch_px": config.patch_px,
                           "nomenclature": nomenclature.to_dict() if nomenclature is not None else None})
    torch.save(state.state_dict(), tmp / STATE_FILE)
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def _truncate_log(path: Path, last_step: int) -> None:
    if not path.is_file():
        return
    keep = []
    with open(path) as f:
        for line in f:
            try:
                if json.loads(line)["step"] <= last_step:
                    keep.append(line)
            except (json.JSONDecodeError, KeyError):
                break  # torn final line from a crash
    path.write_text("".join(keep))


def train(config: TrainConfig, manifest: SplitManifest, output_dir: str | os.PathLike,
          on_step=None) -> TrainResult:
    """Checkpointed training; an existing run in ``output_dir`` is resumed.

    A checkpoint is written after every pseudo-epoch under
    ``checkpoints/epoch_NNNN``. With a validation split configured, only the
    latest and the best (by mIoU) are retained, the best also copied to
    ``checkpoints/best``.
    """
    _check_classes(config, manifest)
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    log_path = root / METRICS_FILE

    latest = _latest_checkpoint(root)
    if latest is not None:
        model, meta = load_checkpoint(latest)
        if meta["model_spec"] != config.model_spec:
            raise ValueError(f"{latest} was trained with a different model spec")
        state = new_state(model, config)
        state.load_state_dict(torch.load(latest / STATE_FILE, weights_only=False))
        _truncate_log(log_path, state.step)
        logger.info("resuming from %s (pseudo-epoch %d, step %d)", latest, state.pseudo_epoch, state.step)
    else:
        model = build_model(config.model_spec, config.seed)
        state = new_state(model, config)
        log_path.write_text("")
        (root / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    state.log_path = log_path

    val_tiles = []
    if config.validation_split:
        val_tiles = [t for t in manifest.by_split(config.validation_split) if t.has_labels]
        if not val_tiles:
            raise ValueError(f"validation split {config.validation_split!r} has no labeled tiles")

    best_dir = root / "checkpoints" / "best"
    while state.pseudo_epoch < config.pseudo_epochs:
        run_pseudo_epoch(state, model, manifest, config, on_step)
        improved = False
        if val_tiles:
            cm = evaluate_tiles(model, val_tiles, manifest.nomenclature, config.patch_px, config.eval_overlap_px)
            score = {"pseudo_epoch": state.pseudo_epoch, "oa": overall_accuracy(cm), "miou": mean_iou(cm)}
            state.validation.append(score)
            with open(log_path, "a") as f:
                f.write(json.dumps({"step": state.step, "validation": score}) + "\n")
            if state.best_miou is None or score["miou"] > state.best_miou:
                state.best_miou = score["miou"]
                improved = True
        current = _epoch_dir(root, state.pseudo_epoch)
        current.parent.mkdir(parents=True, exist_ok=True)
        _save(current, model, state, config, manifest.nomenclature)
        if val_tiles:
            if improved:
                tmp = best_dir.with_name("best.partial")
                if tmp.exists():
                    shutil.rmtree(tmp)
                shutil.copytree(current, tmp)
                if best_dir.exists():
                    shutil.rmtree(best_dir)
                os.replace(tmp, best_dir)
            for d in (root / "checkpoints").glob("epoch_*"):
                if d != current:
                    shutil.rmtree(d)

    final = _latest_checkpoint(root)
    return TrainResult(final, best_dir if best_dir.exists() else None, log_path, state, model)


# --- labeled-data ablation ---

def ablation_run(config: TrainConfig, manifest: SplitManifest, labeled_tile_counts: Sequence[int],
                 repeats: int, validation_split: Optional[str] = None) -> list[dict]:
    """Train ``repeats`` models per labeled-tile count on seeded random tile subsets.

    Each model is scored on the fixed validation split (default: the
    configured one, else ``test``). Standard deviations are population
    values, so a single repeat reports 0.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    split = validation_split or config.validation_split or "test"
    val_tiles = [t for t in manifest.by_split(split) if t.has_labels]
    if not val_tiles:
        raise ValueError(f"validation split {split!r} has no labeled tiles")
    available = [t.tile_id for t in manifest.by_split("labeled_train")]
    for n in labeled_tile_counts:
        if not 1 <= n <= len(available):
            raise ValueError(f"labeled tile count {n} not in [1, {len(available)}]")

    rows = []
    for n in labeled_tile_counts:
        oas, mious = [], []
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, n, r]))
            chosen = sorted(rng.choice(len(available), size=n, replace=False).tolist())
            cfg = replace(config, seed=config.seed + r, labeled_tile_ids=[available[i] for i in chosen],
                          validation_split=None)
            model, _ = fit(cfg, manifest)
            cm = evaluate_tiles(model, val_tiles, manifest.nomenclature, cfg.patch_px, cfg.eval_overlap_px)
            oas.append(overall_accuracy(cm))
            mious.append(mean_iou(cm))
            logger.info("ablation count=%d repeat=%d oa=%.4f miou=%.4f", n, r, oas[-1], mious[-1])
        rows.append({
            "count": n,
            "mean_oa": float(np.mean(oas)),
            "std_oa": float(np.std(oas)),
            "mean_miou": float(np.mean(mious)),
            "std_miou": float(np.std(mious)),
            "oa_runs": oas,
            "miou_runs": mious,
        })
    return rows


def write_ablation_csv(rows: list[dict], path: str | os.PathLike) -> None:
    cols = ["count", "mean_oa", "std_oa", "mean_miou", "std_miou"]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
