"""Registered finite-difference checks for every differentiable primitive.

Each entry probes one primitive (shading, normals, warp fields,
rasterized-depth interpolation, bilinear sampling, losses, and the full
reconstruction path) on seeded random inputs in fp64 and compares the
tape gradient against central differences. Pose gradients through the
rasterizer get a looser tolerance and keep their probes away from
coverage boundaries, where visibility itself is not differentiable.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .camera import (WarpField, forward_warp_field, intrinsics_from_fov,
                     inverse_warp_field)
from .gradcheck import GradCheckReport, grad_check
from .losses import (LossWeights, RandomConvEncoder, l1_loss, objective,
                     perceptual_loss, reg_depth_pair, reg_viewpoint)
from .photometric import LightState, light_from_angles, normals_from_depth, shade
from .renderer import bilinear_sample, rasterize_depth, reproject, tessellate

__all__ = ["GradSuiteEntry", "run_gradient_suite", "POSE_TOL", "DEFAULT_TOL"]

DEFAULT_TOL = 1e-4
POSE_TOL = 1e-3


@dataclass
class GradSuiteEntry:
    name: str
    tol: float
    max_rel_err: float
    passed: bool
    probes: int


def _smooth_depth(rng, n, mid=0.5, amp=0.04):
    base = np.full((n, n), mid)
    for _ in range(3):
        cx, cy = rng.uniform(1.0, n - 2.0, 2)
        sig = rng.uniform(0.15, 0.35) * n
        a = rng.uniform(-amp, amp)
        yy, xx = np.mgrid[0:n, 0:n]
        base += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
    return base


def _small_pose(rng, rot=0.05, trans=0.01):
    return np.concatenate([rng.uniform(-rot, rot, 3),
                           rng.uniform(-trans, trans, 3)])


def _light(rng):
    # keep the diffuse dot product away from the max{0, .} kink
    return LightState.from_angles(rng.uniform(-40, 40), rng.uniform(-40, 40),
                                  rng.uniform(0.2, 0.5), rng.uniform(0.4, 0.9))


def _mask_interior(cov: np.ndarray, margin: int = 2) -> np.ndarray:
    m = cov.copy()
    for _ in range(margin):
        m = ndimage.binary_erosion(m)
    return m if m.any() else cov


def _probe_coords(rng, n, lo_frac=0.15, hi_frac=0.85):
    # fractional parts kept away from 0/1 so bilinear stays off its kinks
    base = rng.uniform(1.0, n - 2.01, size=(2, n, n))
    frac = rng.uniform(lo_frac, hi_frac, size=(2, n, n))
    return np.floor(base) + frac


def run_gradient_suite(size: int = 8, probes: int = 20,
                       seed: int = 0) -> list[GradSuiteEntry]:
    """Run every registered primitive check; returns one entry per primitive."""
    K = intrinsics_from_fov(size, size, 25.0)
    entries: list[GradSuiteEntry] = []

    def run(name, tol, make_fn_and_x):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        ok = True
        for _ in range(probes):
            f, x0 = make_fn_and_x(rng)
            rep = grad_check(f, x0, tol=tol)
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.passed
        entries.append(GradSuiteEntry(name=name, tol=tol, max_rel_err=worst,
                                      passed=ok, probes=probes))

    # shading -------------------------------------------------------------
    def mk_shade_depth(rng):
        a0 = rng.uniform(0.2, 0.8, size=(size, size, 3))
        light = _light(rng)
        proj = rng.normal(size=(size, size, 3))

        def f(t):
            n = normals_from_depth(t, K)
            return (shade(Tensor(a0), n, light) * Tensor(proj)).sum()
        return f, _smooth_depth(rng, size)

    def mk_shade_albedo(rng):
        d0 = _smooth_depth(rng, size)
        light = _light(rng)
        n = normals_from_depth(Tensor(d0), K)

        def f(t):
            return (shade(t, n, light) ** 2.0).sum()
        return f, rng.uniform(0.2, 0.8, size=(size, size, 3))

    def mk_shade_light(rng):
        d0 = _smooth_depth(rng, size)
        a0 = rng.uniform(0.2, 0.8, size=(size, size, 3))
        n = normals_from_depth(Tensor(d0), K)

        def f(t):
            light = LightState(l=light_from_angles(t[0], t[1]),
                               ks=ad.sigmoid(t[2]), kd=ad.sigmoid(t[3]))
            return (shade(Tensor(a0), n, light) ** 2.0).sum()
        return f, np.array([rng.uniform(-40, 40), rng.uniform(-40, 40),
                            rng.normal(), rng.normal()])

    run("shade/d_depth", DEFAULT_TOL, mk_shade_depth)
    run("shade/d_albedo", DEFAULT_TOL, mk_shade_albedo)
    run("shade/d_light", DEFAULT_TOL, mk_shade_light)

    # normals ---------------------------------------------------------------
    def mk_normals(rng):
        proj = rng.normal(size=(size, size, 3))

        def f(t):
            return (normals_from_depth(t, K) * Tensor(proj)).sum()
        return f, _smooth_depth(rng, size)

    run("normals/d_depth", DEFAULT_TOL, mk_normals)

    # warp fields -------------------------------------------------------------
    def mk_fwarp_depth(rng):
        w0 = _small_pose(rng)
        proj = rng.normal(size=(2, size, size))

        def f(t):
            wf = forward_warp_field(t, w0, K)
            return (wf.u * Tensor(proj[0]) + wf.v * Tensor(proj[1])).sum()
        return f, _smooth_depth(rng, size)

    def mk_fwarp_pose(rng):
        d0 = _smooth_depth(rng, size)
        proj = rng.normal(size=(2, size, size))

        def f(t):
            wf = forward_warp_field(Tensor(d0), t, K)
            return (wf.u * Tensor(proj[0]) + wf.v * Tensor(proj[1])).sum()
        return f, _small_pose(rng)

    def mk_iwarp_depth(rng):
        w0 = _small_pose(rng)
        proj = rng.normal(size=(2, size, size))

        def f(t):
            wf = inverse_warp_field(t, w0, K)
            return (wf.u * Tensor(proj[0]) + wf.v * Tensor(proj[1])).sum()
        return f, _smooth_depth(rng, size)

    def mk_iwarp_pose(rng):
        d0 = _smooth_depth(rng, size)
        proj = rng.normal(size=(2, size, size))

        def f(t):
            wf = inverse_warp_field(Tensor(d0), t, K)
            return (wf.u * Tensor(proj[0]) + wf.v * Tensor(proj[1])).sum()
        return f, _small_pose(rng)

    run("forward_warp/d_depth", DEFAULT_TOL, mk_fwarp_depth)
    run("forward_warp/d_pose", DEFAULT_TOL, mk_fwarp_pose)
    run("inverse_warp/d_depth", DEFAULT_TOL, mk_iwarp_depth)
    run("inverse_warp/d_pose", DEFAULT_TOL, mk_iwarp_pose)

    # rasterized depth interpolation -----------------------------------------
    def mk_raster_depth(rng):
        w0 = _small_pose(rng)
        d0 = _smooth_depth(rng, size)
        base = rasterize_depth(tessellate(Tensor(d0), K), w0, K)
        sel = _mask_interior(base.coverage)
        proj = rng.normal(size=(size, size)) * sel

        def f(t):
            out = rasterize_depth(tessellate(t, K), w0, K)
            return (out.depth * Tensor(proj)).sum()
        return f, d0

    def mk_raster_pose(rng):
        d0 = _smooth_depth(rng, size)
        w0 = _small_pose(rng)
        base = rasterize_depth(tessellate(Tensor(d0), K), w0, K)
        sel = _mask_interior(base.coverage)
        proj = rng.normal(size=(size, size)) * sel

        def f(t):
            out = rasterize_depth(tessellate(Tensor(d0), K), t, K)
            return (out.depth * Tensor(proj)).sum()
        return f, w0

    run("rasterize/d_depth", DEFAULT_TOL, mk_raster_depth)
    run("rasterize/d_pose", POSE_TOL, mk_raster_pose)

    # bilinear sampling --------------------------------------------------------
    def mk_bilinear_image(rng):
        coords = _probe_coords(rng, size)
        wf = WarpField(u=Tensor(coords[0]), v=Tensor(coords[1]),
                       valid=np.ones((size, size), bool))

        def f(t):
            out, _ = bilinear_sample(t, wf)
            return (out ** 2.0).sum()
        return f, rng.uniform(0.1, 0.9, size=(size, size, 3))

    def mk_bilinear_coords(rng):
        J0 = rng.uniform(0.1, 0.9, size=(size, size, 3))

        def f(t):
            wf = WarpField(u=t[0], v=t[1], valid=np.ones((size, size), bool))
            out, _ = bilinear_sample(Tensor(J0), wf)
            return (out ** 2.0).sum()
        return f, _probe_coords(rng, size)

    run("bilinear/d_image", DEFAULT_TOL, mk_bilinear_image)
    run("bilinear/d_coords", DEFAULT_TOL, mk_bilinear_coords)

    # losses -----------------------------------------------------------------
    def mk_l1(rng):
        target = rng.uniform(0.0, 1.0, size=(size, size, 3))
        gap = (0.02 + rng.uniform(0, 0.3, size=target.shape)) \
            * np.where(rng.random(target.shape) < 0.5, -1.0, 1.0)

        def f(t):
            return l1_loss(t, Tensor(target))
        return f, target + gap

    encoder = RandomConvEncoder(seed=seed)

    def mk_perc(rng):
        target = rng.uniform(0.0, 1.0, size=(size, size, 3))

        def f(t):
            return perceptual_loss(t.reshape((1, size, size, 3)),
                                   Tensor(target[None]), encoder)
        return f, rng.uniform(0.0, 1.0, size=(size, size, 3))

    def mk_vp(rng):
        def f(t):
            return reg_viewpoint(t)
        return f, rng.normal(scale=0.3, size=(4, 6))

    def mk_dpair(rng):
        dj = _smooth_depth(rng, size)

        def f(t):
            return reg_depth_pair(t, Tensor(dj))
        return f, _smooth_depth(rng, size)

    run("loss/l1", DEFAULT_TOL, mk_l1)
    run("loss/perceptual", DEFAULT_TOL, mk_perc)
    run("loss/reg_viewpoint", DEFAULT_TOL, mk_vp)
    run("loss/reg_depth_pair", DEFAULT_TOL, mk_dpair)

    # full reconstruction loss on a random scene ------------------------------
    def _recon_loss(d, a, w, light_vec, target, weights):
        light = LightState(l=light_from_angles(light_vec[0], light_vec[1]),
                           ks=ad.sigmoid(light_vec[2]),
                           kd=ad.sigmoid(light_vec[3]))
        n = normals_from_depth(d, K)
        J = shade(a, n, light)
        rep = reproject(J, d, w, K)
        recs = rep.image.reshape((1,) + rep.image.shape)
        tgts = Tensor(target[None])
        total, _ = objective(recs, tgts, d.reshape((1, size, size)),
                             w.reshape((1, 6)), weights, encoder=encoder)
        return total

    weights = LossWeights()

    def mk_full_depth(rng):
        a0 = rng.uniform(0.2, 0.8, size=(size, size, 3))
        w0 = _small_pose(rng)
        lv = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40),
                       rng.normal(), rng.normal()])
        target = rng.uniform(0.0, 1.0, size=(size, size, 3))

        def f(t):
            return _recon_loss(t, Tensor(a0), Tensor(w0), Tensor(lv),
                               target, weights)
        return f, _smooth_depth(rng, size)

    def mk_full_albedo(rng):
        d0 = _smooth_depth(rng, size)
        w0 = _small_pose(rng)
        lv = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40),
                       rng.normal(), rng.normal()])
        target = rng.uniform(0.0, 1.0, size=(size, size, 3))

        def f(t):
            return _recon_loss(Tensor(d0), t, Tensor(w0), Tensor(lv),
                               target, weights)
        return f, rng.uniform(0.2, 0.8, size=(size, size, 3))

    def mk_full_pose(rng):
        d0 = _smooth_depth(rng, size)
        a0 = rng.uniform(0.2, 0.8, size=(size, size, 3))
        lv = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40),
                       rng.normal(), rng.normal()])
        target = rng.uniform(0.0, 1.0, size=(size, size, 3))

        def f(t):
            return _recon_loss(Tensor(d0), Tensor(a0), t, Tensor(lv),
                               target, weights)
        return f, _small_pose(rng)

    run("reconstruction/d_depth", DEFAULT_TOL, mk_full_depth)
    run("reconstruction/d_albedo", DEFAULT_TOL, mk_full_albedo)
    run("reconstruction/d_pose", POSE_TOL, mk_full_pose)

    return entries
