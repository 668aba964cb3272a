"""Command-line entry point: train, eval, predict, analyze, subsample, ablate.

Configuration is a single JSON file with optional sections ``model``,
``loss``, ``train`` and ``analysis`` (plus top-level ``nomenclature`` and
``raster_cache``). Unknown keys are rejected; command-line flags override
config values.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (
    ManifestError,
    SplitManifest,
    TileRecord,
    ClassNomenclature,
    configure_raster_cache,
    default_nomenclature,
    load_manifest,
    load_nomenclature,
    save_manifest,
    subsample_tiny,
)
from .losses import LossSpec
from .models import CheckpointError, ModelSpec, load_checkpoint, strip_unsupervised

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
CONFIG_SECTIONS = ("model", "loss", "train", "analysis", "nomenclature", "raster_cache")

logger = logging.getLogger("semiseg")


class ConfigError(ValueError):
    pass


def _default_config() -> dict:
    from .analysis import AnalysisParams
    from .trainer import TrainConfig

    cfg = TrainConfig().to_dict()
    return {
        "model": cfg.pop("model_spec"),
        "loss": cfg.pop("loss_spec"),
        "train": cfg,
        "analysis": asdict(AnalysisParams()),
    }


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return cfg


def build_train_config(cfg: dict, args):
    from .trainer import TrainConfig

    train = dict(cfg.get("train", {}))
    for key in ("model_spec", "loss_spec"):
        if key in train:
            raise ConfigError(f"put {key} under the top-level 'model'/'loss' sections")
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        train["workers"] = args.workers
    if getattr(args, "pseudo_epochs", None) is not None:
        train["pseudo_epochs"] = args.pseudo_epochs
    try:
        loss = LossSpec.from_dict(cfg.get("loss", {}))
        model_d = dict(cfg.get("model", {}))
        if "unsup_kind" not in model_d and "unsup_channels" not in model_d:
            base = ModelSpec.for_loss(loss, model_d.get("backbone", "unet"),
                                      model_d.get("architecture", "berunda_late"),
                                      model_d.get("num_classes", 15), model_d.get("base_width", 64),
                                      model_d.get("input_channels", 3))
            model_d = {**base.to_dict(), **model_d}
        model = ModelSpec.from_dict(model_d)
        return TrainConfig.from_dict({**train, "model_spec": model, "loss_spec": loss})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _nomenclature(cfg: dict, args) -> ClassNomenclature:
    path = getattr(args, "nomenclature", None) or cfg.get("nomenclature")
    return load_nomenclature(path) if path else default_nomenclature()


def _manifest(path, nomenclature) -> SplitManifest:
    return load_manifest(path, nomenclature)


# --- commands ---

def cmd_train(args) -> int:
    from .trainer import train

    cfg = read_config(args.config)
    configure_raster_cache(cfg.get("raster_cache", 32))
    config = build_train_config(cfg, args)
    manifest = _manifest(args.manifest, _nomenclature(cfg, args))
    result = train(config, manifest, args.out)
    print(f"final checkpoint: {result.checkpoint}")
    if result.best_checkpoint:
        print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def _load_for_inference(checkpoint):
    model, meta = load_checkpoint(checkpoint)
    nom = meta.get("nomenclature")
    nomenclature = ClassNomenclature.from_dict(nom) if nom else default_nomenclature()
    if nomenclature.num_classes != meta["model_spec"].num_classes:
        raise CheckpointError("checkpoint nomenclature and model class count disagree")
    return model, meta, nomenclature


def cmd_eval(args) -> int:
    from .evaluation import evaluate_tiles, metrics_report, write_metrics

    model, meta, nomenclature = _load_for_inference(args.checkpoint)
    if args.nomenclature:
        nomenclature = load_nomenclature(args.nomenclature)
        if nomenclature.num_classes != meta["model_spec"].num_classes:
            raise CheckpointError(
                f"nomenclature has {nomenclature.num_classes} classes, model has {meta['model_spec'].num_classes}"
            )
    manifest = _manifest(args.manifest, nomenclature)
    tiles = [t for t in manifest.by_split(args.split) if t.has_labels]
    if not tiles:
        raise ValueError(f"split {args.split!r} has no tiles with ground truth")
    patch = args.patch_px or meta.get("patch_px", 512)
    cm = evaluate_tiles(strip_unsupervised(model), tiles, nomenclature, patch, args.overlap_px)
    report = metrics_report(cm, nomenclature)
    report["split"] = args.split
    report["tiles"] = len(tiles)
    out = Path(args.out)
    write_metrics(report, out / "metrics.json")
    print(f"OA {report['oa']:.4f}  mIoU {report['miou']:.4f}  -> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from PIL import Image

    from .evaluation import save_prediction, stitched_inference

    model, meta, nomenclature = _load_for_inference(args.checkpoint)
    net = strip_unsupervised(model)
    patch = args.patch_px or meta.get("patch_px", 512)
    tiles = []
    if args.manifest:
        manifest = _manifest(args.manifest, nomenclature)
        tiles = manifest.by_split(args.split) if args.split else list(manifest)
    for p in args.images or []:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"image not found: {p}")
        with Image.open(p) as im:
            w, h = im.size
        tiles.append(TileRecord(p.stem, str(p), None, "-", "test", w, h))
    if not tiles:
        raise ValueError("nothing to predict: give --manifest or --images")
    for t in tiles:
        labels = stitched_inference(net, t, patch, args.overlap_px)
        save_prediction(labels, nomenclature, args.out, t.tile_id)
    print(f"wrote {len(tiles)} predictions to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import AnalysisParams, coverage_report, write_report

    cfg = read_config(args.config)
    configure_raster_cache(cfg.get("raster_cache", 32))
    params = dict(cfg.get("analysis", {}))
    if args.seed is not None:
        params["seed"] = args.seed
    for key in ("perplexity", "grid_resolution", "nu"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    params = AnalysisParams.from_dict(params)
    if not Path(args.encoder).is_file():
        raise FileNotFoundError(f"encoder not found: {args.encoder}")
    manifest = _manifest(args.manifest, _nomenclature(cfg, args))
    report = coverage_report(manifest, args.encoder, params)
    write_report(report, args.out)
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_subsample(args) -> int:
    manifest = _manifest(args.manifest, _nomenclature({}, args))
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = Path(args.out)
    sub = subsample_tiny(manifest, args.target, args.subtile_px, rng, out, materialize=not args.no_materialize)
    save_manifest(sub, out / "manifest.csv")
    print(f"{len(sub)} sub-tiles -> {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablation_run, write_ablation_csv

    cfg = read_config(args.config)
    configure_raster_cache(cfg.get("raster_cache", 32))
    config = build_train_config(cfg, args)
    manifest = _manifest(args.manifest, _nomenclature(cfg, args))
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--counts must be comma-separated integers, got {args.counts!r}") from None
    rows = ablation_run(config, manifest, counts, args.repeats, args.split)
    out = Path(args.out)
    write_ablation_csv(rows, out / "ablation.csv")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    print(f"{len(rows)} rows -> {out / 'ablation.csv'}")
    return EXIT_OK


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    defaults = json.dumps(_default_config(), indent=2)
    p = argparse.ArgumentParser(prog="semiseg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, manifest=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
        if manifest:
            sp.add_argument("--manifest", required=True, help="tile manifest (CSV or JSON-lines)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--workers", type=int, default=None, help="data-loading threads")
        sp.add_argument("--nomenclature", default=None, help="class nomenclature JSON (default: MiniFrance)")

    epilog = "default configuration:\n" + defaults
    sp = sub.add_parser("train", help="train a model", epilog=epilog,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.add_argument("--pseudo-epochs", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics on a labeled split")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--patch-px", type=int, default=None, help="default: training patch size")
    sp.add_argument("--overlap-px", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="class maps for tiles")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--split", default=None)
    sp.add_argument("--images", nargs="*", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--patch-px", type=int, default=None)
    sp.add_argument("--overlap-px", type=int, default=0)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("analyze", help="appearance coverage report", epilog=epilog,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.add_argument("--encoder", required=True, help="ONNX feature extractor")
    sp.add_argument("--perplexity", type=float, default=None)
    sp.add_argument("--grid-resolution", dest="grid_resolution", type=int, default=None)
    sp.add_argument("--nu", type=float, default=None)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("subsample", help="draw a tiny sub-tile dataset")
    common(sp, config=False)
    sp.add_argument("--target", type=int, required=True, help="number of sub-tiles")
    sp.add_argument("--subtile-px", type=int, default=1000)
    sp.add_argument("--no-materialize", action="store_true", help="record crop windows instead of writing files")
    sp.set_defaults(func=cmd_subsample)

    sp = sub.add_parser("ablate", help="labeled-tile-count ablation", epilog=epilog,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.add_argument("--counts", required=True, help="comma-separated labeled tile counts")
    sp.add_argument("--repeats", type=int, default=4)
    sp.add_argument("--split", default=None, help="validation split (default: test)")
    sp.add_argument("--pseudo-epochs", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import NonFiniteLossError

    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
