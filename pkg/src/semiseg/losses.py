"""Supervised and unsupervised objectives.

All tensors are batched and channel-first: images ``(B, C, H, W)``, class
scores ``(B, num_classes, H, W)``, membership maps ``(B, K, H, W)`` and label
maps ``(B, H, W)``. Quantities defined per image (cluster centers, the
unnormalized sums of the relaxed K-means and Mumford-Shah terms) are computed
image by image and then averaged over the batch, so a batch of one gives the
per-image value exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import torch
import torch.nn.functional as F

RECONSTRUCTION_KINDS = ("l1", "l2")
SEGMENTATION_KINDS = ("relaxed_kmeans", "mumford_shah")
LOSS_KINDS = RECONSTRUCTION_KINDS + SEGMENTATION_KINDS + ("none",)

DEFAULT_LAMBDA = {"l1": 2.0, "l2": 2.0, "relaxed_kmeans": 5.0, "mumford_shah": 5.0, "none": 0.0}
CENTER_EPS = 1e-8


@dataclass
class LossSpec:
    """Auxiliary objective configuration.

    ``lam`` weights the unsupervised term against cross-entropy; ``None``
    picks the kind's default (2.0 for reconstruction, 5.0 for segmentation).
    ``K`` is the number of clusters for segmentation kinds; ``None`` means
    "same as the number of supervised classes" and is resolved by the model.
    """

    kind: str = "none"
    lam: Optional[float] = None
    alpha_rec: float = 1.0
    alpha_reg: float = 1.0
    K: Optional[int] = None
    normalize_reg: bool = False
    detach_centers: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.kind]
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.alpha_rec < 0 or self.alpha_reg < 0:
            raise ValueError("alpha_rec and alpha_reg must be nonnegative")
        if self.K is not None:
            if self.kind not in SEGMENTATION_KINDS:
                raise ValueError(f"K only applies to segmentation kinds, not {self.kind!r}")
            if self.K < 2:
                raise ValueError(f"K must be at least 2, got {self.K}")

    @property
    def is_segmentation(self) -> bool:
        return self.kind in SEGMENTATION_KINDS

    @property
    def is_reconstruction(self) -> bool:
        return self.kind in RECONSTRUCTION_KINDS

    @property
    def enabled(self) -> bool:
        return self.kind != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss option(s): {sorted(unknown)}")
        return cls(**d)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_memberships(x: torch.Tensor, y_hat: torch.Tensor) -> None:
    if x.dim() != 4 or y_hat.dim() != 4:
        raise ValueError("expected (B, C, H, W) image and (B, K, H, W) memberships")
    if x.shape[0] != y_hat.shape[0] or x.shape[2:] != y_hat.shape[2:]:
        raise ValueError(
            f"image {tuple(x.shape)} and memberships {tuple(y_hat.shape)} disagree on batch/spatial size"
        )


def cross_entropy(logits: torch.Tensor, y: torch.Tensor, void_ids: Iterable[int] = (),
                  return_count: bool = False):
    """Mean negative log-likelihood over non-void pixels.

    With ``return_count`` the number of counted pixels is returned as well; a
    count of zero flags an all-void batch, for which the loss is 0.
    """
    if logits.dim() != 4 or y.dim() != 3 or logits.shape[0] != y.shape[0] or logits.shape[2:] != y.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(y.shape)} do not match")
    num_classes = logits.shape[1]
    y = y.long()
    if y.numel() and (int(y.max()) >= num_classes or int(y.min()) < 0):
        raise ValueError(f"label id out of range for {num_classes} classes")
    valid = torch.ones_like(y, dtype=torch.bool)
    for v in void_ids:
        valid &= y != int(v)
    n = int(valid.sum())
    if n == 0:
        loss = logits.sum() * 0.0
    else:
        nll = F.cross_entropy(logits, y, reduction="none")
        loss = nll[valid].sum() / n
    return (loss, n) if return_count else loss


def l1_reconstruction(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels and channels."""
    _check_same_shape(x, x_hat, "l1_reconstruction")
    return (x - x_hat).abs().mean()


def l2_reconstruction(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels and channels."""
    _check_same_shape(x, x_hat, "l2_reconstruction")
    return (x - x_hat).pow(2).mean()


def cluster_centers(x: torch.Tensor, y_hat: torch.Tensor, eps: float = CENTER_EPS,
                    detach: bool = False) -> torch.Tensor:
    """Membership-weighted mean color of each cluster, shape ``(B, K, C)``."""
    _check_memberships(x, y_hat)
    num = torch.einsum("bchw,bkhw->bkc", x, y_hat)
    den = y_hat.sum(dim=(2, 3)).unsqueeze(-1) + eps
    c = num / den
    return c.detach() if detach else c


def quantized_image(c: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Per-pixel combination of cluster centers weighted by memberships."""
    if c.dim() != 3 or c.shape[0] != y_hat.shape[0] or c.shape[1] != y_hat.shape[1]:
        raise ValueError(f"centers {tuple(c.shape)} do not match memberships {tuple(y_hat.shape)}")
    return torch.einsum("bkc,bkhw->bchw", c, y_hat)


def kmeans_regularizer(y_hat: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """Sum over clusters and pixels of p(1 - p); zero iff memberships are one-hot."""
    per_image = (y_hat * (1.0 - y_hat)).sum(dim=(1, 2, 3))
    if normalize:
        per_image = per_image / (y_hat.shape[2] * y_hat.shape[3])
    return per_image.mean()


def relaxed_kmeans_loss(x: torch.Tensor, y_hat: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    c = cluster_centers(x, y_hat, detach=spec.detach_centers)
    rec = l1_reconstruction(x, quantized_image(c, y_hat))
    reg = kmeans_regularizer(y_hat, spec.normalize_reg)
    return spec.alpha_rec * rec + spec.alpha_reg * reg


def total_variation(y_hat: torch.Tensor) -> torch.Tensor:
    """Per-image sum of |forward difference| along rows plus along columns.

    The difference past the last row/column is taken as zero.
    """
    d_rows = (y_hat[:, :, 1:, :] - y_hat[:, :, :-1, :]).abs().sum(dim=(1, 2, 3))
    d_cols = (y_hat[:, :, :, 1:] - y_hat[:, :, :, :-1]).abs().sum(dim=(1, 2, 3))
    return d_rows + d_cols


def mumford_shah_loss(x: torch.Tensor, y_hat: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    c = cluster_centers(x, y_hat, detach=spec.detach_centers)
    # (B, K, C, H, W) squared distances to each center
    dist = (x.unsqueeze(1) - c[..., None, None]).pow(2).sum(dim=2)
    data = (dist * y_hat).sum(dim=(1, 2, 3))
    reg = total_variation(y_hat)
    if spec.normalize_reg:
        npix = y_hat.shape[2] * y_hat.shape[3]
        data, reg = data / npix, reg / npix
    return (data + spec.alpha_reg * reg).mean()


def unsupervised_loss(x: torch.Tensor, out_u: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    """Dispatch on ``spec.kind``; ``out_u`` is a reconstruction or a membership map."""
    if spec.kind == "l1":
        return spec.alpha_rec * l1_reconstruction(x, out_u)
    if spec.kind == "l2":
        return spec.alpha_rec * l2_reconstruction(x, out_u)
    if spec.kind == "relaxed_kmeans":
        return relaxed_kmeans_loss(x, out_u, spec)
    if spec.kind == "mumford_shah":
        return mumford_shah_loss(x, out_u, spec)
    raise ValueError("loss kind 'none' has no unsupervised term")


def combined_loss(l_s, l_u, spec: LossSpec):
    """``l_s + lam * l_u``; an absent ``l_s`` (unlabeled batch) leaves ``lam * l_u``."""
    if spec.lam < 0:
        raise ValueError("lambda must be nonnegative")
    if l_u is None:
        return l_s
    if l_s is None:
        return spec.lam * l_u
    return l_s + spec.lam * l_u
