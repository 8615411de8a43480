"""Reconstruction losses, regularizers, and the combined training objective.

The objective per batch is
    mean_i [ l1 * L1_i + perc * Lperc_i + (2 d / (B-1)) * sum_{j>i} Rd_ij ]
      + vp * ||mean_i w_i||^2
with an L1 reconstruction term, a frozen-encoder perceptual term, a
pairwise depth-variance shrinker, and the viewpoint-mean regularizer.
Pixel terms are mean-normalized so the weights are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

__all__ = [
    "LossWeights", "l1_loss", "perceptual_loss", "RandomConvEncoder",
    "IdentityEncoder", "reg_viewpoint", "reg_depth_pair", "objective",
]


@dataclass
class LossWeights:
    """Objective coefficients; defaults follow the training recipe."""

    lambda1: float = 1.0
    lambda_perc: float = 0.003
    lambda_d: float = 0.05
    lambda_vp: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda_perc", "lambda_d", "lambda_vp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def l1_loss(rec, target) -> Tensor:
    """Mean absolute difference over all pixels and channels."""
    rec, target = as_tensor(rec), as_tensor(target)
    if rec.shape != target.shape:
        raise ValueError(f"shape mismatch {rec.shape} vs {target.shape}")
    return ad.absolute(rec - target).mean()


class IdentityEncoder:
    """Trivial single-layer encoder: features are the image itself."""

    def features(self, img: Tensor) -> list[Tensor]:
        return [as_tensor(img)]


class RandomConvEncoder:
    """Fixed, seeded, randomly initialized strided-conv feature pyramid.

    Stands in for a pretrained image encoder in the perceptual loss: the
    weights are frozen at construction and never receive gradients, but
    gradients flow through the features to the input image.
    """

    def __init__(self, channels=(16, 32, 64, 128), in_channels: int = 3,
                 seed: int = 0, slope: float = 0.2):
        rng = np.random.default_rng(seed)
        self.slope = slope
        self.weights: list[Tensor] = []
        cin = in_channels
        for cout in channels:
            std = np.sqrt(2.0 / (4 * 4 * cin))
            w = rng.normal(0.0, std, size=(4, 4, cin, cout)).astype(np.float32)
            self.weights.append(Tensor(w, requires_grad=False))
            cin = cout

    def features(self, img) -> list[Tensor]:
        x = as_tensor(img)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        feats = []
        for w in self.weights:
            wt = w if x.dtype == np.float32 else Tensor(w.data.astype(x.dtype))
            x = ad.leaky_relu(ad.conv2d(x, wt, stride=2, pad=1), self.slope)
            feats.append(x)
        return feats


def perceptual_loss(rec, target, encoder) -> Tensor:
    """Sum over encoder layers of the size-normalized squared feature gap."""
    rec, target = as_tensor(rec), as_tensor(target)
    if rec.shape != target.shape:
        raise ValueError(f"shape mismatch {rec.shape} vs {target.shape}")
    total = None
    for fr, ft in zip(encoder.features(rec), encoder.features(target.detach())):
        term = ((fr - ft) ** 2.0).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("encoder produced no feature maps")
    return total


def reg_viewpoint(poses) -> Tensor:
    """Squared norm of the batch-mean 6-vector pose."""
    poses = as_tensor(poses)
    if poses.ndim == 1:
        poses = poses.reshape((1,) + poses.shape)
    if poses.shape[0] < 1 or poses.size == 0:
        raise ValueError("viewpoint regularizer needs a non-empty batch")
    m = poses.mean(axis=0)
    return (m * m).sum()


def reg_depth_pair(d_i, d_j) -> Tensor:
    """Mean squared difference between two depth maps."""
    d_i, d_j = as_tensor(d_i), as_tensor(d_j)
    if d_i.shape != d_j.shape:
        raise ValueError(f"shape mismatch {d_i.shape} vs {d_j.shape}")
    diff = d_i - d_j
    return (diff * diff).mean()


def objective(recs, targets, depths, poses, weights: LossWeights,
              encoder=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Combined batch objective; returns (total, per-term components).

    Components are the weight-free factors, so
    total = lambda1 * c[l1] + lambda_perc * c[perc]
          + lambda_d * c[depth_pair] + lambda_vp * c[viewpoint].
    The pairwise depth term needs B >= 2 and is dropped for B = 1.
    """
    recs, targets = as_tensor(recs), as_tensor(targets)
    depths, poses = as_tensor(depths), as_tensor(poses)
    B = recs.shape[0]
    components: dict[str, Tensor] = {}
    components["l1"] = l1_loss(recs, targets)
    if encoder is not None:
        components["perc"] = perceptual_loss(recs, targets, encoder)
    else:
        components["perc"] = Tensor(np.zeros(()))
    if B >= 2:
        # sum_{i<j} mean((d_i - d_j)^2) == B * sum_i mean(d_i^2) - mean((sum_i d_i)^2)
        per = (depths * depths).mean(axis=(-2, -1))
        total_map = depths.sum(axis=0)
        pair_sum = B * per.sum() - (total_map * total_map).mean()
        components["depth_pair"] = pair_sum * (2.0 / (B * (B - 1)))
    else:
        components["depth_pair"] = Tensor(np.zeros(()))
    components["viewpoint"] = reg_viewpoint(poses)
    total = (weights.lambda1 * components["l1"]
             + weights.lambda_perc * components["perc"]
             + weights.lambda_d * components["depth_pair"]
             + weights.lambda_vp * components["viewpoint"])
    return total, components
