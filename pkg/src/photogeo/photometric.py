"""Depth-to-normal computation, Lambertian shading, and the flip operator.

The canonical image is shaded as
    J = (ks + kd * max(0, <l, n>)) * albedo
with a unit light direction l and per-pixel unit normals n derived from
the depth map. Normals face the camera (n_z < 0 under the +z-into-scene
convention) and the output is deliberately not clamped to [0, 1] so the
map stays smooth and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .camera import Intrinsics, pixel_rays

__all__ = [
    "LightState", "light_from_angles", "normals_from_depth", "shade", "hflip",
    "cross3", "normalize_vectors",
]

_DEGENERATE_EPS = 1e-20


@dataclass
class LightState:
    """Unit light direction plus ambient (ks) and diffuse (kd) weights."""

    l: Tensor
    ks: Tensor
    kd: Tensor

    @classmethod
    def from_angles(cls, ax_deg, ay_deg, ks, kd) -> "LightState":
        return cls(l=light_from_angles(ax_deg, ay_deg),
                   ks=as_tensor(ks), kd=as_tensor(kd))


def light_from_angles(ax_deg, ay_deg) -> Tensor:
    """Unit light direction from two angles in degrees.

    l = normalize(sin ax cos ay, sin ay, -cos ax cos ay); (0, 0) gives
    head-on lighting (0, 0, -1), matching the camera-facing normal
    convention. Accepts scalars or batched (B,) tensors.
    """
    ax, ay = as_tensor(ax_deg), as_tensor(ay_deg)
    if np.any(np.abs(ax.data) > 90.0) or np.any(np.abs(ay.data) > 90.0):
        raise ValueError("light angles must lie within +-90 degrees")
    axr = ax * (np.pi / 180.0)
    ayr = ay * (np.pi / 180.0)
    lx = ad.sin(axr) * ad.cos(ayr)
    ly = ad.sin(ayr)
    lz = -(ad.cos(axr) * ad.cos(ayr))
    l = ad.stack([lx, ly, lz], axis=-1)
    return normalize_vectors(l)


def cross3(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the last axis (..., 3)."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by,
                     az * bx - ax * bz,
                     ax * by - ay * bx], axis=-1)


def normalize_vectors(x: Tensor, eps: float = 0.0) -> Tensor:
    n = ad.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / n


def normals_from_depth(d, K: Intrinsics, return_degenerate_mask: bool = False):
    """Per-pixel unit surface normals of a depth map.

    Tangents follow central differences of the unprojected surface
    (one-sided at the borders), the normal is their normalized cross
    product, oriented toward the camera. Pixels with a vanishing cross
    product get the fronto-parallel normal (0, 0, -1) and are flagged.
    """
    db = as_tensor(d)
    single = db.ndim == 2
    if single:
        db = db.reshape((1,) + db.shape)
    B, H, W = db.shape
    if H < 3 or W < 3:
        raise ValueError("normal computation needs at least a 3x3 map")
    if np.any(db.data <= 0):
        raise ValueError("depth must be strictly positive")
    rays = pixel_rays(K).astype(db.dtype, copy=False)  # (H, W, 3)

    # central differences of the unprojected surface; one step wide at the
    # borders (the normalization that follows absorbs the step length)
    P = db.reshape((B, H, W, 1)) * Tensor(rays)

    def diff_cols(p: Tensor) -> Tensor:
        left = p[:, :, 1:2] - p[:, :, 0:1]
        mid = p[:, :, 2:] - p[:, :, :-2]
        right = p[:, :, -1:] - p[:, :, -2:-1]
        return ad.concatenate([left, mid, right], axis=2)

    def diff_rows(p: Tensor) -> Tensor:
        top = p[:, 1:2] - p[:, 0:1]
        mid = p[:, 2:] - p[:, :-2]
        bot = p[:, -1:] - p[:, -2:-1]
        return ad.concatenate([top, mid, bot], axis=1)

    tu = diff_cols(P)
    tv = diff_rows(P)
    c = cross3(tu, tv)
    # camera-facing orientation: for a surface seen by the camera the raw
    # cross product points along +z, so negate; guard rare folds per pixel
    n_unnorm = -c
    flipped = n_unnorm.data[..., 2] > 0
    if np.any(flipped):
        n_unnorm = ad.where(flipped[..., None], -n_unnorm, n_unnorm)
    sq = (n_unnorm * n_unnorm).sum(axis=-1, keepdims=True)
    degenerate = sq.data[..., 0] < _DEGENERATE_EPS
    sq_safe = ad.where(degenerate[..., None], Tensor(np.ones_like(sq.data)), sq)
    n = n_unnorm / ad.sqrt(sq_safe)
    if np.any(degenerate):
        fallback = np.broadcast_to(np.array([0.0, 0.0, -1.0],
                                            dtype=n.dtype), n.shape).copy()
        n = ad.where(degenerate[..., None], Tensor(fallback), n)
    if single:
        n = n.reshape((H, W, 3))
        degenerate = degenerate.reshape(H, W)
    if return_degenerate_mask:
        return n, degenerate
    return n


def shade(a, n, light: LightState) -> Tensor:
    """Lambertian shading: (ks + kd * max(0, <l, n>)) * albedo.

    Supports unbatched (H, W, 3) maps with scalar light parameters and
    batched (B, H, W, 3) maps with (B,)-shaped light parameters. The
    output is not clamped; values above 1 are legal when ks + kd > 1.
    """
    a, n = as_tensor(a), as_tensor(n)
    l, ks, kd = as_tensor(light.l), as_tensor(light.ks), as_tensor(light.kd)
    if a.ndim == 4:
        B = a.shape[0]
        lmap = l.reshape((B, 1, 1, 3))
        ks_map = ks.reshape((B, 1, 1, 1))
        kd_map = kd.reshape((B, 1, 1, 1))
    else:
        lmap = l.reshape((1, 1, 3))
        ks_map, kd_map = ks, kd
    diffuse = ad.relu((lmap * n).sum(axis=-1, keepdims=True))
    return (ks_map + kd_map * diffuse) * a


def hflip(x, width_axis: int | None = None):
    """Mirror a map about the vertical centerline (exact index permutation).

    Channels-last vector maps (..., H, W, C<=4) flip axis -2; plain maps
    flip the last axis. Works on Tensors and ndarrays; an exact involution
    either way.
    """
    is_tensor = isinstance(x, Tensor)
    arr = x.data if is_tensor else np.asarray(x)
    if width_axis is None:
        width_axis = -2 if (arr.ndim >= 3 and arr.shape[-1] <= 4) else -1
    if is_tensor:
        return ad.flip(x, axis=width_axis)
    return np.flip(arr, axis=width_axis).copy()
