"""Skinning field: softmax over Gaussian-bone Mahalanobis scores plus a learned delta."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .rigid import SE3


class NumericError(FloatingPointError):
    pass


@dataclass
class GaussianBones:
    """K anisotropic Gaussians. ``orientation`` columns are the bone's local axes."""

    center: torch.Tensor  # (..., K, 3)
    orientation: torch.Tensor  # (..., K, 3, 3)
    scale: torch.Tensor  # (..., K, 3)

    def __len__(self):
        return self.center.shape[-2]

    def __getitem__(self, k) -> "GaussianBones":
        return GaussianBones(self.center[..., k, :], self.orientation[..., k, :, :], self.scale[..., k, :])

    def transformed(self, transforms: SE3) -> "GaussianBones":
        """Move each bone by its own rigid transform (bone axis last in batch shape)."""
        return GaussianBones(
            transforms.apply(self.center),
            transforms.rotation @ self.orientation,
            self.scale.expand(transforms.translation.shape),
        )


def mahalanobis(points: torch.Tensor, bones: GaussianBones) -> torch.Tensor:
    """Negative squared Mahalanobis distance of ``points`` (..., 3) to every bone.

    Returns (..., K); the bone dimensions broadcast against the point batch.
    """
    diff = points[..., None, :] - bones.center
    local = torch.einsum("...kji,...kj->...ki", bones.orientation, diff)
    return -((local / bones.scale) ** 2).sum(-1)


def skinning_weights(points: torch.Tensor, bones: GaussianBones, delta=None) -> torch.Tensor:
    """``softmax(mahalanobis + delta)`` over the K bone slots.

    ``delta`` is either a (..., K) tensor of logits or a callable taking the
    points and returning one; ``None`` means no learned correction.
    """
    logits = mahalanobis(points, bones)
    if delta is not None:
        d = delta(points) if callable(delta) else delta
        if not torch.isfinite(d).all():
            bad = (~torch.isfinite(d)).any(-1).nonzero()[0]
            raise NumericError(
                f"non-finite skinning delta at point {points[tuple(bad)].tolist()}"
            )
        logits = logits + d
    return torch.softmax(logits, dim=-1)
