"""Encoder-decoder backbones and the multi-task wirings.

Three semi-supervised layouts are built on SegNet or U-Net backbones:

* ``berunda_early``: one encoder, one full decoder per task.
* ``berunda_late``: shared encoder and decoder, then one 1x1 convolution per task.
* ``wnet``: two stacked U-Nets; the first yields class scores, a softmax of
  those feeds the second, which produces the unsupervised output.

``supervised_only`` is the plain backbone with its classification head.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import LossSpec

BACKBONES = ("segnet", "unet")
ARCHITECTURES = ("supervised_only", "berunda_early", "berunda_late", "wnet")
UNSUP_KINDS = ("reconstruction", "segmentation")
DOWNSAMPLE = 32


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    backbone: str = "unet"
    architecture: str = "berunda_late"
    num_classes: int = 15
    unsup_channels: int = 3
    unsup_kind: Optional[str] = "reconstruction"
    input_channels: int = 3
    base_width: int = 64

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.architecture == "wnet" and self.backbone != "unet":
            raise ValueError("wnet requires the unet backbone")
        if self.num_classes < 1 or self.input_channels < 1 or self.base_width < 1:
            raise ValueError("num_classes, input_channels and base_width must be positive")
        if self.architecture == "supervised_only":
            self.unsup_kind = None
        else:
            if self.unsup_kind not in UNSUP_KINDS:
                raise ValueError(f"{self.architecture} needs unsup_kind in {UNSUP_KINDS}")
            if self.unsup_channels < 1:
                raise ValueError("unsup_channels must be positive")
            if self.unsup_kind == "reconstruction" and self.unsup_channels != self.input_channels:
                raise ValueError("a reconstruction head must output input_channels channels")
            if self.unsup_kind == "segmentation" and self.unsup_channels < 2:
                raise ValueError("a segmentation head needs at least 2 clusters")

    @property
    def has_unsupervised(self) -> bool:
        return self.architecture != "supervised_only"

    @classmethod
    def for_loss(cls, loss: LossSpec, backbone: str = "unet", architecture: str = "berunda_late",
                 num_classes: int = 15, base_width: int = 64, input_channels: int = 3) -> "ModelSpec":
        """Model whose unsupervised head matches ``loss`` (K defaults to ``num_classes``)."""
        if not loss.enabled:
            architecture = "supervised_only"
        if loss.is_segmentation:
            kind, ch = "segmentation", loss.K or num_classes
        else:
            kind, ch = "reconstruction", input_channels
        return cls(backbone, architecture, num_classes, ch, kind, input_channels, base_width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model option(s): {sorted(unknown)}")
        return cls(**d)


def check_compatible(model: ModelSpec, loss: LossSpec) -> None:
    """Raise if the unsupervised head cannot serve the loss."""
    if not loss.enabled:
        return
    if not model.has_unsupervised:
        raise ValueError(f"loss kind {loss.kind!r} needs a multi-task architecture")
    if loss.is_reconstruction and model.unsup_kind != "reconstruction":
        raise ValueError(f"loss kind {loss.kind!r} needs a reconstruction head")
    if loss.is_segmentation:
        if model.unsup_kind != "segmentation":
            raise ValueError(f"loss kind {loss.kind!r} needs a segmentation head")
        if loss.K is not None and loss.K != model.unsup_channels:
            raise ValueError(f"loss K={loss.K} but the head has {model.unsup_channels} channels")


def _conv_bn_relu(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


# --- SegNet ---

_SEGNET_CONVS = (2, 2, 3, 3, 3)


def _segnet_widths(w):
    return (w, 2 * w, 4 * w, 8 * w, 8 * w)


class SegNetEncoder(nn.Module):
    """VGG16-style encoder; keeps max-pooling indices for the decoder."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        widths = _segnet_widths(width)
        self.stages = nn.ModuleList()
        cin = in_channels
        for n, cout in zip(_SEGNET_CONVS, widths):
            layers = []
            for _ in range(n):
                layers.append(_conv_bn_relu(cin, cout))
                cin = cout
            self.stages.append(nn.Sequential(*layers))
        self.out_channels = widths[-1]

    def forward(self, x):
        indices, sizes = [], []
        for stage in self.stages:
            x = stage(x)
            sizes.append(x.shape[-2:])
            x, idx = F.max_pool2d(x, 2, 2, return_indices=True)
            indices.append(idx)
        return x, indices, sizes


class SegNetDecoder(nn.Module):
    """Mirror of the encoder with max-unpooling; outputs ``width`` channels."""

    def __init__(self, width: int):
        super().__init__()
        widths = _segnet_widths(width)
        self.stages = nn.ModuleList()
        for i in reversed(range(5)):
            cin = widths[i]
            cout = widths[i - 1] if i > 0 else widths[0]
            layers = [_conv_bn_relu(cin, cin) for _ in range(_SEGNET_CONVS[i] - 1)]
            layers.append(_conv_bn_relu(cin, cout))
            self.stages.append(nn.Sequential(*layers))
        self.out_channels = widths[0]

    def forward(self, encoded):
        x, indices, sizes = encoded
        for stage, idx, size in zip(self.stages, reversed(indices), reversed(sizes)):
            x = F.max_unpool2d(x, idx, 2, 2, output_size=size)
            x = stage(x)
        return x


# --- U-Net ---

def _unet_widths(w):
    # five poolings; growth stops at 16w to keep the bottleneck at the original U-Net width
    return (w, 2 * w, 4 * w, 8 * w, 16 * w, 16 * w)


class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(_conv_bn_relu(cin, cout), _conv_bn_relu(cout, cout))


class UNetEncoder(nn.Module):
    def __init__(self, in_channels: int, width: int):
        super().__init__()
        widths = _unet_widths(width)
        self.levels = nn.ModuleList()
        cin = in_channels
        for cout in widths:
            self.levels.append(_DoubleConv(cin, cout))
            cin = cout
        self.out_channels = widths[-1]

    def forward(self, x):
        skips = []
        for i, level in enumerate(self.levels):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = level(x)
            skips.append(x)
        return skips


class UNetDecoder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        widths = _unet_widths(width)
        self.ups = nn.ModuleList()
        self.convs = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.ups.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.convs.append(_DoubleConv(2 * widths[i], widths[i]))
        self.out_channels = widths[0]

    def forward(self, skips):
        x = skips[-1]
        for up, conv, skip in zip(self.ups, self.convs, reversed(skips[:-1])):
            x = conv(torch.cat([up(x), skip], dim=1))
        return x


def _make_backbone(name, in_channels, width):
    if name == "segnet":
        return SegNetEncoder(in_channels, width), SegNetDecoder(width)
    return UNetEncoder(in_channels, width), UNetDecoder(width)


# --- multi-task network ---

class MultiTaskNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        # supervised path first so its initialization matches supervised_only for a given seed
        self.encoder, self.decoder = _make_backbone(spec.backbone, spec.input_channels, w)
        self.head_s = nn.Conv2d(self.decoder.out_channels, spec.num_classes, 1)
        if spec.architecture == "berunda_early":
            _, self.decoder_u = _make_backbone(spec.backbone, spec.input_channels, w)
            self.head_u = nn.Conv2d(self.decoder_u.out_channels, spec.unsup_channels, 1)
        elif spec.architecture == "berunda_late":
            self.head_u = nn.Conv2d(self.decoder.out_channels, spec.unsup_channels, 1)
        elif spec.architecture == "wnet":
            self.encoder_u, self.decoder_u = _make_backbone("unet", spec.num_classes, w)
            self.head_u = nn.Conv2d(self.decoder_u.out_channels, spec.unsup_channels, 1)

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected (B, {self.spec.input_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {DOWNSAMPLE}")

    def _activate_unsup(self, z):
        if self.spec.unsup_kind == "segmentation":
            return torch.softmax(z, dim=1)
        return torch.sigmoid(z)

    def forward_supervised(self, x):
        self._check_input(x)
        return self.head_s(self.decoder(self.encoder(x)))

    def forward(self, x):
        """Return ``(class_scores, unsupervised_output)``; the latter is None without a second head."""
        self._check_input(x)
        arch = self.spec.architecture
        encoded = self.encoder(x)
        if arch == "berunda_early":
            scores = self.head_s(self.decoder(encoded))
            return scores, self._activate_unsup(self.head_u(self.decoder_u(encoded)))
        features = self.decoder(encoded)
        scores = self.head_s(features)
        if arch == "berunda_late":
            return scores, self._activate_unsup(self.head_u(features))
        if arch == "wnet":
            probs = torch.softmax(scores, dim=1)
            z = self.head_u(self.decoder_u(self.encoder_u(probs)))
            return scores, self._activate_unsup(z)
        return scores, None

    def forward_unsupervised(self, x):
        """Unsupervised output; supervised-only modules are not traversed."""
        self._check_input(x)
        arch = self.spec.architecture
        if arch == "berunda_early":
            return self._activate_unsup(self.head_u(self.decoder_u(self.encoder(x))))
        if arch == "berunda_late":
            return self._activate_unsup(self.head_u(self.decoder(self.encoder(x))))
        if arch == "wnet":
            return self.forward(x)[1]
        raise ValueError("supervised_only model has no unsupervised branch")


class SupervisedNet(nn.Module):
    """Inference network sharing the supervised path's modules with its parent."""

    def __init__(self, parent: MultiTaskNet):
        super().__init__()
        self.spec = parent.spec
        self.encoder = parent.encoder
        self.decoder = parent.decoder
        self.head_s = parent.head_s
        self._check_input = parent._check_input

    def forward_supervised(self, x):
        self._check_input(x)
        return self.head_s(self.decoder(self.encoder(x)))

    def forward(self, x):
        return self.forward_supervised(x)


def build_model(spec: ModelSpec, seed: int = 0) -> MultiTaskNet:
    """Construct a model; initialization depends only on ``spec`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MultiTaskNet(spec)
    return model


def forward_supervised(model, x):
    return model.forward_supervised(x)


def forward_unsupervised(model, x):
    return model.forward_unsupervised(x)


@dataclass(frozen=True)
class ParameterPartition:
    shared: frozenset
    supervised_only: frozenset
    unsupervised_only: frozenset

    @property
    def all(self) -> frozenset:
        return self.shared | self.supervised_only | self.unsupervised_only


_PARTITION = {
    # module prefix groups: (shared, supervised_only, unsupervised_only)
    "supervised_only": ((), ("encoder", "decoder", "head_s"), ()),
    "berunda_early": (("encoder",), ("decoder", "head_s"), ("decoder_u", "head_u")),
    "berunda_late": (("encoder", "decoder"), ("head_s",), ("head_u",)),
    "wnet": (("encoder", "decoder", "head_s"), (), ("encoder_u", "decoder_u", "head_u")),
}


def parameter_partition(model: MultiTaskNet) -> ParameterPartition:
    """Split trainable parameter names by which batch kinds reach them."""
    groups = _PARTITION[model.spec.architecture]
    sets = ([], [], [])
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        top = name.split(".", 1)[0]
        for bucket, prefixes in zip(sets, groups):
            if top in prefixes:
                bucket.append(name)
                break
        else:
            raise RuntimeError(f"parameter {name} is not assigned to a partition")
    return ParameterPartition(*(frozenset(s) for s in sets))


def strip_unsupervised(model: MultiTaskNet):
    """Drop the unsupervised branch; the result shares weights with ``model``."""
    if model.spec.architecture == "supervised_only":
        return model
    stripped = SupervisedNet(model)
    stripped.train(model.training)
    return stripped


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --- checkpoints ---

WEIGHTS_FILE = "weights.npz"
SIDECAR_FILE = "checkpoint.json"


def state_to_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(directory: str | os.PathLike, model: MultiTaskNet, loss_spec: LossSpec,
                    seed: int, pseudo_epoch: int, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (WEIGHTS_FILE + ".tmp.npz")
    np.savez(tmp, **state_to_arrays(model))
    os.replace(tmp, directory / WEIGHTS_FILE)
    meta = {
        "model_spec": model.spec.to_dict(),
        "loss_spec": loss_spec.to_dict(),
        "seed": seed,
        "pseudo_epoch": pseudo_epoch,
    }
    if extra:
        meta.update(extra)
    tmp = directory / (SIDECAR_FILE + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2))
    os.replace(tmp, directory / SIDECAR_FILE)
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[MultiTaskNet, dict]:
    """Rebuild the model described by the sidecar and load its weights strictly."""
    directory = Path(directory)
    sidecar, weights = directory / SIDECAR_FILE, directory / WEIGHTS_FILE
    if not sidecar.is_file() or not weights.is_file():
        raise CheckpointError(f"{directory} is not a checkpoint directory")
    meta = json.loads(sidecar.read_text())
    try:
        spec = ModelSpec.from_dict(meta["model_spec"])
        loss = LossSpec.from_dict(meta["loss_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint sidecar: {exc}") from exc
    model = build_model(spec, meta.get("seed", 0))
    with np.load(weights) as arrays:
        state = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not match the model spec: {exc}") from exc
    meta["model_spec"] = spec
    meta["loss_spec"] = loss
    return model, meta
