"""Differentiable rendering layer: forward-warp a canonical depth map.

The canonical depth map is tessellated into a pixel mesh (one vertex per
pixel, two triangles per 2x2 quad), rigidly transformed, and z-buffer
rasterized into the actual view with perspective-correct barycentric
interpolation. Visibility is hard: the winning triangle per pixel is
found outside the autodiff graph, then the depth value is re-derived
inside the graph from the winner's projected vertices, so gradients flow
through the interpolation only. The actual image is produced by inverting
the warp with the rasterized depth and bilinearly resampling the canonical
image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .camera import (Intrinsics, WarpField, Z_MIN, inverse_warp_field,
                     padded_intrinsics, pixel_rays, se3_exp)

__all__ = [
    "PixelMesh", "RenderedDepth", "Reprojection",
    "tessellate", "grid_triangles", "rasterize_depth", "fill_rendered_depth",
    "bilinear_sample", "reproject", "export_mesh_off",
]

# inclusive inside-test slack so shared edges and vertices keep coverage
INSIDE_TOL = 1e-9
_DEGENERATE_AREA = 1e-12
# z-buffer keys quantize depth to z_max * 2^-42 (far below the 1e-9
# agreement the rasterizer is held to) and break exact ties by triangle id
_KEY_BITS = 20


@dataclass
class PixelMesh:
    """Depth map tessellation: one vertex per pixel, two triangles per quad."""

    vertices: Tensor          # (B, H*W, 3) unprojected pixel centers
    triangles: np.ndarray     # (M, 3) int64 vertex indices
    grid_hw: tuple[int, int]
    single: bool = False


@dataclass
class RenderedDepth:
    """Actual-view depth with per-pixel coverage.

    Uncovered pixels hold zeros in ``depth``; ``degenerate`` marks batch
    items whose mesh left no covered pixel at all.
    """

    depth: Tensor
    coverage: np.ndarray
    degenerate: np.ndarray


@dataclass
class Reprojection:
    """Result of warping a canonical image into the actual view."""

    image: Tensor             # (..., H, W, C) cropped reconstruction
    valid: np.ndarray         # bilinear in-bounds and warp validity
    coverage: np.ndarray      # rasterized coverage on the crop
    degenerate: np.ndarray    # per-sample zero-coverage flag


def grid_triangles(H: int, W: int) -> np.ndarray:
    """Triangle index triples for an H x W pixel grid.

    Each 2x2 quad splits along its (u, v) -> (u+1, v+1) diagonal, giving
    2*(W-1)*(H-1) triangles.
    """
    v, u = np.meshgrid(np.arange(H - 1), np.arange(W - 1), indexing="ij")
    a = (v * W + u).ravel()
    b = a + 1
    c = a + W
    d = c + 1
    t1 = np.stack([a, b, d], axis=1)
    t2 = np.stack([a, d, c], axis=1)
    return np.concatenate([t1, t2], axis=0).astype(np.int64)


def tessellate(d, K: Intrinsics) -> PixelMesh:
    """Lift a depth map to a pixel mesh with unprojected vertices."""
    db = as_tensor(d)
    single = db.ndim == 2
    if single:
        db = db.reshape((1,) + db.shape)
    if np.any(db.data <= 0):
        raise ValueError("depth must be strictly positive")
    B, H, W = db.shape
    rays = Tensor(pixel_rays(K).reshape(1, H * W, 3).astype(db.dtype, copy=False))
    verts = db.reshape((B, H * W, 1)) * rays
    return PixelMesh(vertices=verts, triangles=grid_triangles(H, W),
                     grid_hw=(H, W), single=single)


def _winner_search(pu: np.ndarray, pv: np.ndarray, pz: np.ndarray,
                   tris: np.ndarray, H: int, W: int, z_min: float,
                   pix_offset: np.ndarray | None = None,
                   buf_pixels: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hard-visibility pass: per-pixel winning triangle by nearest depth.

    Returns (pixel_flat_index, triangle_index) for every covered pixel.
    Ties on quantized depth resolve to the lowest triangle index, making
    the scan order-independent and deterministic. ``pix_offset`` shifts
    each triangle's pixel indices into its own raster, so a whole batch
    can share one search.
    """
    if len(tris) >= (1 << _KEY_BITS):
        raise ValueError("mesh too large for z-buffer key packing")
    if buf_pixels is None:
        buf_pixels = H * W
    # visibility decisions always run in fp64 so key quantization stays
    # far below the rasterizer's agreement tolerance
    pu = pu.astype(np.float64, copy=False)
    pv = pv.astype(np.float64, copy=False)
    pz = pz.astype(np.float64, copy=False)
    u0, u1, u2 = pu[tris[:, 0]], pu[tris[:, 1]], pu[tris[:, 2]]
    v0, v1, v2 = pv[tris[:, 0]], pv[tris[:, 1]], pv[tris[:, 2]]
    z0, z1, z2 = pz[tris[:, 0]], pz[tris[:, 1]], pz[tris[:, 2]]

    denom = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
    keep = (np.minimum(np.minimum(z0, z1), z2) > z_min) \
        & (np.abs(denom) > _DEGENERATE_AREA) \
        & np.isfinite(u0) & np.isfinite(u1) & np.isfinite(u2) \
        & np.isfinite(v0) & np.isfinite(v1) & np.isfinite(v2)

    umin = np.maximum(np.ceil(np.minimum(np.minimum(u0, u1), u2) - INSIDE_TOL), 0)
    umax = np.minimum(np.floor(np.maximum(np.maximum(u0, u1), u2) + INSIDE_TOL), W - 1)
    vmin = np.maximum(np.ceil(np.minimum(np.minimum(v0, v1), v2) - INSIDE_TOL), 0)
    vmax = np.minimum(np.floor(np.maximum(np.maximum(v0, v1), v2) + INSIDE_TOL), H - 1)
    keep &= (umax >= umin) & (vmax >= vmin)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)

    u0, u1, u2 = u0[idx], u1[idx], u2[idx]
    v0, v1, v2 = v0[idx], v1[idx], v2[idx]
    z0, z1, z2 = z0[idx], z1[idx], z2[idx]
    denom = denom[idx]
    umin, vmin = umin[idx].astype(np.int64), vmin[idx].astype(np.int64)
    nu = (umax[idx] - umin).astype(np.int64) + 1
    nv = (vmax[idx] - vmin).astype(np.int64) + 1
    offs = pix_offset[idx] if pix_offset is not None else None

    cand_pix: list[np.ndarray] = []
    cand_tri: list[np.ndarray] = []
    cand_z: list[np.ndarray] = []
    for dy in range(int(nv.max())):
        row_ok = dy < nv
        for dx in range(int(nu.max())):
            m = row_ok & (dx < nu)
            if not m.any():
                continue
            sel = np.nonzero(m)[0]
            px = umin[sel] + dx
            py = vmin[sel] + dy
            l0 = ((v1[sel] - v2[sel]) * (px - u2[sel])
                  + (u2[sel] - u1[sel]) * (py - v2[sel])) / denom[sel]
            l1 = ((v2[sel] - v0[sel]) * (px - u2[sel])
                  + (u0[sel] - u2[sel]) * (py - v2[sel])) / denom[sel]
            l2 = 1.0 - l0 - l1
            inside = (l0 >= -INSIDE_TOL) & (l1 >= -INSIDE_TOL) & (l2 >= -INSIDE_TOL)
            if not inside.any():
                continue
            sel = sel[inside]
            zp = 1.0 / (l0[inside] / z0[sel] + l1[inside] / z1[sel]
                        + l2[inside] / z2[sel])
            ok = zp > z_min
            sel = sel[ok]
            if sel.size == 0:
                continue
            p = py[inside][ok] * W + px[inside][ok]
            if offs is not None:
                p = p + offs[sel]
            cand_pix.append(p)
            cand_tri.append(idx[sel])
            cand_z.append(zp[ok])

    if not cand_pix:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    pix = np.concatenate(cand_pix)
    tri = np.concatenate(cand_tri)
    zp = np.concatenate(cand_z)

    z_scale = zp.max() * 2.0 ** -42
    key = (np.round(zp / z_scale).astype(np.int64) << _KEY_BITS) | tri
    buf = np.full(buf_pixels, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(buf, pix, key)
    won = key == buf[pix]
    return pix[won], tri[won]


def rasterize_depth(mesh: PixelMesh, w, K: Intrinsics,
                    z_min: float = Z_MIN) -> RenderedDepth:
    """Render the mesh's depth as seen from pose w.

    Nearest surface wins per pixel; the winning depth is re-derived inside
    the autodiff graph via perspective-correct barycentric interpolation of
    the projected winner vertices, so it is differentiable w.r.t. vertex
    depths and pose. Coverage itself carries no gradient.
    """
    wt = as_tensor(w)
    wb = wt.reshape((1, 6)) if wt.ndim == 1 else wt
    B = mesh.vertices.shape[0]
    if wb.shape[0] != B:
        raise ValueError("pose batch does not match mesh batch")
    H, W = mesh.grid_hw
    N = H * W
    R, T = se3_exp(wb)
    Pw = ad.matmul(mesh.vertices, ad.transpose(R, (0, 2, 1))) + T.reshape((B, 1, 3))
    X, Y, Z = Pw[:, :, 0], Pw[:, :, 1], Pw[:, :, 2]
    front = Z.data > z_min
    Z_safe = ad.where(front, Z, Tensor(np.ones_like(Z.data)))
    pu = K.f * X / Z_safe + K.cu
    pv = K.f * Y / Z_safe + K.cv

    pu_data = np.where(front, pu.data, np.nan)
    pv_data = np.where(front, pv.data, np.nan)
    # one shared visibility pass: tile the triangle list with per-sample
    # vertex and pixel offsets
    M = len(mesh.triangles)
    vert_off = (np.arange(B, dtype=np.int64) * N)[:, None, None]
    tris_all = (mesh.triangles[None] + vert_off).reshape(B * M, 3)
    pix_off = np.repeat(np.arange(B, dtype=np.int64) * N, M)
    pix, tri = _winner_search(pu_data.reshape(-1), pv_data.reshape(-1),
                              Z.data.reshape(-1), tris_all, H, W, z_min,
                              pix_offset=pix_off, buf_pixels=B * N)
    coverage = np.zeros(B * N, dtype=bool)
    coverage[pix] = True
    coverage = coverage.reshape(B, H, W)
    degenerate = ~coverage.any(axis=(1, 2))

    if pix.size == 0:
        depth = Tensor(np.zeros((B, H, W), dtype=Z.dtype))
    else:
        vid = tris_all[tri]                            # (ncov, 3) global ids
        g0, g1, g2 = vid[:, 0], vid[:, 1], vid[:, 2]
        uf, vf, zf = (t.reshape((B * N,)) for t in (pu, pv, Z))
        u0, u1, u2 = uf[g0], uf[g1], uf[g2]
        v0, v1, v2 = vf[g0], vf[g1], vf[g2]
        z0, z1, z2 = zf[g0], zf[g1], zf[g2]
        px = Tensor((pix % W).astype(uf.dtype))
        py = Tensor(((pix // W) % H).astype(uf.dtype))
        denom = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
        l0 = ((v1 - v2) * (px - u2) + (u2 - u1) * (py - v2)) / denom
        l1 = ((v2 - v0) * (px - u2) + (u0 - u2) * (py - v2)) / denom
        l2 = 1.0 - l0 - l1
        zp = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
        depth = ad.scatter((B * N,), pix, zp).reshape((B, H, W))

    if mesh.single:
        return RenderedDepth(depth=depth.reshape((H, W)),
                             coverage=coverage.reshape(H, W),
                             degenerate=degenerate)
    return RenderedDepth(depth=depth, coverage=coverage, degenerate=degenerate)


def fill_rendered_depth(rendered: RenderedDepth) -> Tensor:
    """Fill disocclusion holes from the nearest covered pixel.

    The fill gathers inside the graph, so filled pixels pass gradient to
    their source. Degenerate (zero-coverage) samples stay all zero.
    """
    depth = rendered.depth
    single = depth.ndim == 2
    cov = rendered.coverage[None] if single else rendered.coverage
    db = depth.reshape((1,) + depth.shape) if single else depth
    B, H, W = db.shape
    flat = db.reshape((B * H * W,))
    idx = np.arange(B * H * W, dtype=np.int64).reshape(B, H, W)
    for b in range(B):
        holes = ~cov[b]
        if not holes.any() or holes.all():
            continue
        nearest = ndimage.distance_transform_edt(holes, return_distances=False,
                                                 return_indices=True)
        src = nearest[0] * W + nearest[1] + b * H * W
        idx[b][holes] = src[holes]
    out = flat[idx.reshape(-1)].reshape((B, H, W))
    return out.reshape((H, W)) if single else out


def bilinear_sample(J, coords: WarpField) -> tuple[Tensor, np.ndarray]:
    """Bilinearly resample image J at the warp-field coordinates.

    Out-of-bounds or warp-invalid pixels produce zeros; the companion mask
    marks in-bounds samples. Differentiable w.r.t. both the image and the
    coordinates.
    """
    J = as_tensor(J)
    has_ch = J.shape[-1] <= 4 and J.ndim >= 3 and J.shape[-1] != J.shape[-2]
    # normalize to (B, H, W, C) / coords (B, Ho, Wo)
    Jb = J
    if not has_ch:
        Jb = J.reshape(J.shape + (1,))
    single = Jb.ndim == 3
    if single:
        Jb = Jb.reshape((1,) + Jb.shape)
    u, v = coords.u, coords.v
    cu = u.reshape((1,) + u.shape) if u.ndim == 2 else u
    cv = v.reshape((1,) + v.shape) if v.ndim == 2 else v
    valid = coords.valid.reshape(cu.shape) if coords.valid is not None else \
        np.ones(cu.shape, dtype=bool)
    B, H, W, C = Jb.shape
    _, Ho, Wo = cu.shape

    ud, vd = cu.data, cv.data
    in_b = valid & (ud >= 0) & (ud <= W - 1) & (vd >= 0) & (vd <= H - 1) \
        & np.isfinite(ud) & np.isfinite(vd)
    x0 = np.clip(np.floor(np.where(in_b, ud, 0.0)), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(np.where(in_b, vd, 0.0)), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wu = ad.where(in_b, cu, Tensor(np.zeros_like(ud))) - x0
    wv = ad.where(in_b, cv, Tensor(np.zeros_like(vd))) - y0

    flat = Jb.reshape((B * H * W, C))
    boff = (np.arange(B, dtype=np.int64) * H * W)[:, None, None]

    def corner(yy, xx):
        g = flat[(boff + yy * W + xx).reshape(-1)]
        return g.reshape((B, Ho, Wo, C))

    wu4 = wu.reshape((B, Ho, Wo, 1))
    wv4 = wv.reshape((B, Ho, Wo, 1))
    out = (corner(y0, x0) * (1.0 - wu4) * (1.0 - wv4)
           + corner(y0, x1) * wu4 * (1.0 - wv4)
           + corner(y1, x0) * (1.0 - wu4) * wv4
           + corner(y1, x1) * wu4 * wv4)
    out = out * in_b[..., None].astype(Jb.dtype)

    if single:
        out = out.reshape((Ho, Wo, C))
        in_b = in_b.reshape(Ho, Wo)
    if not has_ch:
        out = out.reshape(out.shape[:-1])
    return out, in_b


def reproject(J, d, w, K: Intrinsics, z_min: float = Z_MIN) -> Reprojection:
    """Full reprojection: rasterize depth, invert the warp, resample J.

    When the canonical maps come in at twice the camera size (the padded
    prediction grid), the warp runs on the padded grid and the result is
    the centered K.W x K.H crop; same-size inputs pass through uncropped.
    """
    Jt, dt = as_tensor(J), as_tensor(d)
    gh, gw = dt.shape[-2:] if dt.ndim >= 2 else (0, 0)
    if (gh, gw) == (K.H, K.W):
        K_eff, crop = K, False
    elif (gh, gw) == (2 * K.H, 2 * K.W):
        K_eff, crop = padded_intrinsics(K), True
    else:
        raise ValueError(f"depth grid {gh}x{gw} matches neither the camera "
                         f"size nor its 2x padded grid")
    mesh = tessellate(dt, K_eff)
    rendered = rasterize_depth(mesh, w, K_eff, z_min=z_min)
    d_actual = fill_rendered_depth(rendered)
    inv = inverse_warp_field(d_actual, w, K_eff, z_min=z_min)
    image, in_b = bilinear_sample(Jt, inv)
    valid = in_b & inv.valid.reshape(in_b.shape)
    coverage = rendered.coverage
    if crop:
        r0, c0 = K.H // 2, K.W // 2
        rows, cols = slice(r0, r0 + K.H), slice(c0, c0 + K.W)
        if image.ndim > valid.ndim:      # trailing channel axis
            image = image[(..., rows, cols, slice(None))]
        else:
            image = image[(..., rows, cols)]
        valid = valid[..., rows, cols]
        coverage = coverage[..., rows, cols]
    return Reprojection(image=image, valid=valid, coverage=coverage,
                        degenerate=rendered.degenerate)


def export_mesh_off(mesh: PixelMesh, path, batch_index: int = 0) -> None:
    """Write one mesh of the batch as an ASCII OFF polygon file."""
    verts = mesh.vertices.data[batch_index]
    tris = mesh.triangles
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(verts)} {len(tris)} 0\n")
        for x, y, z in verts:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in tris:
            fh.write(f"3 {a} {b} {c}\n")
