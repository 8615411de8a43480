"""Perspective camera, SE(3) exponential map, and per-pixel warp fields.

Conventions: +z points into the scene, image origin is top-left with v
running down, u along the width. A pixel (u, v) at depth d unprojects to
P = d * K^-1 (u, v, 1). A 6-vector pose w holds an axis-angle rotation in
w[0:3] (radians) and a translation in w[3:6] (scene units).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

__all__ = [
    "Intrinsics", "WarpField", "intrinsics_from_fov", "padded_intrinsics",
    "se3_exp", "unproject", "project", "pixel_rays",
    "forward_warp_field", "inverse_warp_field", "Z_MIN",
]

# points whose transformed z-coordinate falls at or below this are masked
Z_MIN = 0.01

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; the principal point sits at the image center."""

    f: float
    cu: float
    cv: float
    W: int
    H: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cu],
                         [0.0, self.f, self.cv],
                         [0.0, 0.0, 1.0]])


@dataclass
class WarpField:
    """Per-pixel target coordinates plus a validity mask.

    ``u`` and ``v`` are Tensors shaped like the source depth map; ``valid``
    marks pixels whose transformed z stayed in front of the near plane.
    Masked-valid coordinates are always finite.
    """

    u: Tensor
    v: Tensor
    valid: np.ndarray


def intrinsics_from_fov(W: int, H: int, theta_fov_deg: float = 25.0) -> Intrinsics:
    """Build intrinsics from a horizontal field of view in degrees."""
    if W < 2 or H < 2:
        raise ValueError("image must be at least 2x2 pixels")
    if not 0.0 < theta_fov_deg < 180.0:
        raise ValueError(f"field of view must be in (0, 180), got {theta_fov_deg}")
    f = W / (2.0 * np.tan(np.deg2rad(theta_fov_deg) / 2.0))
    return Intrinsics(f=float(f), cu=(W - 1) / 2.0, cv=(H - 1) / 2.0, W=W, H=H)


def padded_intrinsics(K: Intrinsics, factor: int = 2) -> Intrinsics:
    """Extend the sensor by ``factor`` around the same optical axis.

    The focal length is unchanged, so the central W x H window of the
    padded canvas is exactly the original camera.
    """
    Wp, Hp = K.W * factor, K.H * factor
    return Intrinsics(f=K.f, cu=(Wp - 1) / 2.0, cv=(Hp - 1) / 2.0, W=Wp, H=Hp)


def _hat(rx: Tensor, ry: Tensor, rz: Tensor) -> Tensor:
    z = Tensor(np.zeros_like(rx.data))
    rows = ad.stack([z, -rz, ry, rz, z, -rx, -ry, rx, z], axis=-1)
    return rows.reshape(rows.shape[:-1] + (3, 3))


def se3_exp(w) -> tuple[Tensor, Tensor]:
    """Exponential map of a 6-vector pose: R by Rodrigues, T verbatim.

    Accepts (6,) or (B, 6); returns (R, T) with matching batching.
    Below the small-angle threshold the rotation is I + hat(w).
    """
    w = as_tensor(w)
    single = w.ndim == 1
    wb = w.reshape((1,) + w.shape) if single else w
    if wb.shape[-1] != 6:
        raise ValueError("pose must have 6 components")
    dtype = wb.dtype
    rot = wb[:, 0:3]
    T = wb[:, 3:6]
    rx, ry, rz = rot[:, 0], rot[:, 1], rot[:, 2]
    theta_sq = (rot * rot).sum(axis=-1)
    small = theta_sq.data < _SMALL_ANGLE ** 2
    theta_sq_safe = ad.where(small, Tensor(np.ones_like(theta_sq.data)), theta_sq)
    theta = ad.sqrt(theta_sq_safe)
    a = ad.sin(theta) / theta
    b = (1.0 - ad.cos(theta)) / theta_sq_safe
    hat = _hat(rx, ry, rz)
    hat_sq = ad.matmul(hat, hat)
    eye = Tensor(np.broadcast_to(np.eye(3, dtype=dtype), hat.shape).copy())
    r_full = eye + a.reshape((-1, 1, 1)) * hat + b.reshape((-1, 1, 1)) * hat_sq
    r_small = eye + hat
    R = ad.where(small[:, None, None], r_small, r_full)
    if single:
        return R.reshape((3, 3)), T.reshape((3,))
    return R, T


def unproject(K: Intrinsics, u, v, d) -> Tensor:
    """Lift pixel (u, v) at depth d to a 3D point d * K^-1 (u, v, 1)."""
    d = as_tensor(d)
    if np.any(d.data <= 0):
        raise ValueError("depth must be strictly positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - K.cu) / K.f
    y = (v - K.cv) / K.f
    ray = np.stack([x, y, np.ones_like(x)], axis=-1).astype(d.dtype, copy=False)
    return d.reshape(d.shape + (1,)) * Tensor(ray) if d.ndim else d * Tensor(ray)


def project(K: Intrinsics, P) -> tuple[Tensor, Tensor]:
    """Pixel coordinates of camera-frame points P (..., 3)."""
    P = as_tensor(P)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    return K.f * X / Z + K.cu, K.f * Y / Z + K.cv


def pixel_rays(K: Intrinsics) -> np.ndarray:
    """Constant (H, W, 3) grid of K^-1 (u, v, 1) viewing rays."""
    u, v = np.meshgrid(np.arange(K.W, dtype=np.float64),
                       np.arange(K.H, dtype=np.float64))
    x = (u - K.cu) / K.f
    y = (v - K.cv) / K.f
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _as_batched_map(d) -> tuple[Tensor, bool]:
    d = as_tensor(d)
    if d.ndim == 2:
        return d.reshape((1,) + d.shape), True
    if d.ndim == 3:
        return d, False
    raise ValueError(f"expected a (H, W) or (B, H, W) map, got shape {d.shape}")


def _transform_points(P_flat: Tensor, R: Tensor, T: Tensor) -> Tensor:
    # row vectors: p' = p @ R^T + T
    Rt = ad.transpose(R, (0, 2, 1)) if R.ndim == 3 else ad.transpose(R, (1, 0))
    return ad.matmul(P_flat, Rt) + T.reshape((-1, 1, 3))


def forward_warp_field(d, w, K: Intrinsics, z_min: float = Z_MIN) -> WarpField:
    """Map canonical pixels to actual-view coordinates (eta applied to d).

    For each pixel p: p' from K (d * R K^-1 p + T), masked where the
    transformed z falls at or below ``z_min``.
    """
    db, single = _as_batched_map(d)
    if np.any(db.data <= 0):
        raise ValueError("depth must be strictly positive")
    w = as_tensor(w)
    wb = w.reshape((1, 6)) if w.ndim == 1 else w
    B, H, W = db.shape
    rays = Tensor(pixel_rays(K).reshape(1, H * W, 3).astype(db.dtype, copy=False))
    P = db.reshape((B, H * W, 1)) * rays
    R, T = se3_exp(wb)
    Pw = _transform_points(P, R, T)
    X, Y, Z = Pw[:, :, 0], Pw[:, :, 1], Pw[:, :, 2]
    valid = Z.data > z_min
    Z_safe = ad.where(valid, Z, Tensor(np.ones_like(Z.data)))
    u = K.f * X / Z_safe + K.cu
    v = K.f * Y / Z_safe + K.cv
    shape = (H, W) if single else (B, H, W)
    return WarpField(u=u.reshape(shape), v=v.reshape(shape),
                     valid=valid.reshape(shape))


def inverse_warp_field(d_actual, w, K: Intrinsics, z_min: float = Z_MIN) -> WarpField:
    """Map actual-view pixels back to canonical coordinates.

    Uses the actual-view depth d': P = R^-1 (d' * K^-1 p' - T), then
    projects P through K. Masked where the canonical z is too small.
    """
    db, single = _as_batched_map(d_actual)
    w = as_tensor(w)
    wb = w.reshape((1, 6)) if w.ndim == 1 else w
    B, H, W = db.shape
    rays = Tensor(pixel_rays(K).reshape(1, H * W, 3).astype(db.dtype, copy=False))
    Pp = db.reshape((B, H * W, 1)) * rays
    R, T = se3_exp(wb)
    # R^-1 x as a row vector is x @ R
    P = ad.matmul(Pp - T.reshape((-1, 1, 3)), R)
    X, Y, Z = P[:, :, 0], P[:, :, 1], P[:, :, 2]
    valid = Z.data > z_min
    Z_safe = ad.where(valid, Z, Tensor(np.ones_like(Z.data)))
    u = K.f * X / Z_safe + K.cu
    v = K.f * Y / Z_safe + K.cv
    shape = (H, W) if single else (B, H, W)
    return WarpField(u=u.reshape(shape), v=v.reshape(shape),
                     valid=valid.reshape(shape))
