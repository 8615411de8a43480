"""End-to-end training, evaluation, and novel-view rendering.

A training step decomposes a batch, randomly mirrors the canonical maps
per sample (the symmetry constraint), shades, reprojects, evaluates the
combined objective, and applies one Adam update. Evaluation follows the
actual-view protocol: the predicted canonical depth is rasterized through
the predicted pose and compared with the ground-truth actual-view depth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .camera import intrinsics_from_fov, padded_intrinsics
from .checkpoint import (load_checkpoint, pack_model, save_checkpoint,
                         unpack_model)
from .config import config_to_text, load_config_file
from .losses import LossWeights, RandomConvEncoder, l1_loss, objective
from .metrics import MetricReport, normal_angle_error, si_error
from .networks import Decomposition, NetConfig, decompose, init_params
from .optim import AdamOptimizer
from .photometric import LightState, hflip, light_from_angles, \
    normals_from_depth, shade
from .renderer import rasterize_depth, reproject, tessellate
from .synthdata import (SceneSample, SynthConfig, generate_dataset,
                        gt_actual_view_depth, load_image_folder,
                        load_scene_archive)

__all__ = [
    "TrainConfig", "TrainLogRecord", "TrainResult", "train_step", "train",
    "evaluate", "constant_depth_baseline", "render_views", "reconstruct",
    "save_run", "load_run", "build_dataset", "dataset_spec_images",
]

MAX_CONSECUTIVE_SKIPS = 3


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults: 32 px images, batch 16, 2000 iterations.

    The full-scale recipe (batch 128, 64 px, ~35k iterations) remains
    reachable through these fields.
    """

    data: str = "synth:count=500"
    image_size: int = 32
    batch_size: int = 16
    iterations: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 1.0
    lambda_perc: float = 0.003
    lambda_d: float = 0.05
    lambda_vp: float = 1.0
    flip_prob: float = 0.5
    seed: int = 0
    deterministic: bool = False
    out: str = "runs/exp"
    log_every: int = 10
    fov_deg: float = 25.0
    channels: tuple[int, ...] = (16, 32, 64)
    bottleneck: int = 128
    albedo_arch: str = "simple"
    perc_channels: tuple[int, ...] = (8, 16, 32, 64)
    perc_seed: int = 0
    synth_rotation_max_deg: float = 12.0
    synth_translation_max: float = 0.04
    synth_light_angle_max_deg: float = 60.0
    synth_bump_amplitude: float = 0.09

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairwise depth term)")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")

    def weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda_perc=self.lambda_perc,
                           lambda_d=self.lambda_d, lambda_vp=self.lambda_vp)

    def net_config(self) -> NetConfig:
        return NetConfig(image_size=self.image_size, channels=self.channels,
                         bottleneck=self.bottleneck,
                         albedo_arch=self.albedo_arch, seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(image_size=self.image_size, fov_deg=self.fov_deg,
                           rotation_max_deg=self.synth_rotation_max_deg,
                           translation_max=self.synth_translation_max,
                           light_angle_max_deg=self.synth_light_angle_max_deg,
                           bump_amplitude=self.synth_bump_amplitude)

    def camera(self):
        return intrinsics_from_fov(self.image_size, self.image_size,
                                   self.fov_deg)


@dataclass
class TrainLogRecord:
    """One line per step; components recombine to the objective."""

    iteration: int
    l1: float
    perc: float
    depth_pair: float
    viewpoint: float
    objective: float
    seconds: float
    skipped: bool = False

    def recombined(self, w: LossWeights) -> float:
        return (w.lambda1 * self.l1 + w.lambda_perc * self.perc
                + w.lambda_d * self.depth_pair + w.lambda_vp * self.viewpoint)

    def as_line(self) -> str:
        flag = " SKIP" if self.skipped else ""
        return (f"iter={self.iteration} l1={self.l1:.6g} perc={self.perc:.6g} "
                f"depth_pair={self.depth_pair:.6g} viewpoint={self.viewpoint:.6g} "
                f"objective={self.objective:.6g} sec={self.seconds:.3f}{flag}")

    def as_csv(self) -> str:
        return (f"{self.iteration},{self.l1:.10g},{self.perc:.10g},"
                f"{self.depth_pair:.10g},{self.viewpoint:.10g},"
                f"{self.objective:.10g},{self.seconds:.4f},{int(self.skipped)}")


TRAIN_CSV_HEADER = "iteration,l1,perc,depth_pair,viewpoint,objective,seconds,skipped"


@dataclass
class TrainResult:
    params: dict
    buffers: dict
    records: list[TrainLogRecord]
    config: TrainConfig


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def build_dataset(cfg: TrainConfig):
    """Resolve the config's data spec into (images, scenes-or-None).

    ``synth:count=N[,seed=S]`` generates closed-loop scenes; a directory
    path loads a scene archive if manifests are present, otherwise a plain
    image folder (no ground truth).
    """
    spec = cfg.data
    if spec.startswith("synth:"):
        kv = dict(p.split("=") for p in spec[len("synth:"):].split(",") if p)
        count = int(kv.get("count", 500))
        base_seed = int(kv.get("seed", cfg.seed))
        scenes = generate_dataset(count, cfg.synth_config(), base_seed=base_seed)
        images = np.stack([s.image for s in scenes]).astype(np.float32)
        return images, scenes
    root = Path(spec)
    if root.is_dir() and any(root.glob("*/manifest.txt")):
        scenes, _ = load_scene_archive(root)
        images = np.stack([s.image for s in scenes]).astype(np.float32)
        return images, scenes
    return load_image_folder(root, cfg.image_size), None


def dataset_spec_images(cfg: TrainConfig) -> np.ndarray:
    return build_dataset(cfg)[0]


# ---------------------------------------------------------------------------
# forward model shared by training, eval, and rendering
# ---------------------------------------------------------------------------

def _render_batch(dec: Decomposition, cfg: TrainConfig,
                  flip_mask: np.ndarray | None):
    """Shade + reproject a decomposition; returns (recon, reproj result)."""
    K = cfg.camera()
    Kp = padded_intrinsics(K)
    a, d = dec.a, dec.d
    if flip_mask is not None and flip_mask.any():
        a = ad.where(flip_mask[:, None, None, None], hflip(a), a)
        d = ad.where(flip_mask[:, None, None], hflip(d), d)
    normals = normals_from_depth(d, Kp)
    J = shade(a, normals, dec.light)
    rep = reproject(J, d, dec.w, K)
    return rep


def train_step(batch: np.ndarray, params: dict, buffers: dict,
               opt: AdamOptimizer, cfg: TrainConfig, encoder,
               flip_rng: np.random.Generator,
               iteration: int) -> TrainLogRecord:
    """One optimization step on a (B, S, S, 3) float32 batch."""
    t0 = time.perf_counter()
    net_cfg = cfg.net_config()
    images_t = Tensor(batch)
    dec = decompose(images_t, params, net_cfg, buffers, training=True)
    flip_mask = flip_rng.random(batch.shape[0]) < cfg.flip_prob

    rep = _render_batch(dec, cfg, flip_mask)
    keep = ~rep.degenerate
    if keep.sum() < 2:
        return TrainLogRecord(iteration, np.nan, np.nan, np.nan, np.nan,
                              np.nan, time.perf_counter() - t0, skipped=True)
    if keep.all():
        recs, targets, depths, poses = rep.image, images_t, dec.d, dec.w
    else:
        sel = np.nonzero(keep)[0]
        recs, targets = rep.image[sel], images_t[sel]
        depths, poses = dec.d[sel], dec.w[sel]

    total, comps = objective(recs, targets, depths, poses, cfg.weights(),
                             encoder=encoder)
    vals = {k: float(v.data) for k, v in comps.items()}
    obj = float(total.data)
    if not np.isfinite(obj):
        return TrainLogRecord(iteration, vals["l1"], vals["perc"],
                              vals["depth_pair"], vals["viewpoint"], obj,
                              time.perf_counter() - t0, skipped=True)
    opt.zero_grad()
    total.backward()
    opt.step()
    return TrainLogRecord(iteration, vals["l1"], vals["perc"],
                          vals["depth_pair"], vals["viewpoint"], obj,
                          time.perf_counter() - t0)


def train(cfg: TrainConfig, dataset_images: np.ndarray | None = None,
          params: dict | None = None, buffers: dict | None = None,
          log_fn=None) -> TrainResult:
    """Run the full training loop; aborts after 3 consecutive skipped steps."""
    if dataset_images is None:
        dataset_images, _ = build_dataset(cfg)
    if params is None:
        params, buffers = init_params(cfg.net_config())
    encoder = RandomConvEncoder(cfg.perc_channels, seed=cfg.perc_seed)
    opt = AdamOptimizer(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                        eps=cfg.eps)
    ss = np.random.SeedSequence([cfg.seed, 0xB10C])
    batch_rng, flip_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    n = len(dataset_images)
    records: list[TrainLogRecord] = []
    consecutive_skips = 0
    for it in range(cfg.iterations):
        idx = batch_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = dataset_images[idx]
        rec = train_step(batch, params, buffers, opt, cfg, encoder,
                         flip_rng, it)
        records.append(rec)
        consecutive_skips = consecutive_skips + 1 if rec.skipped else 0
        if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
            raise RuntimeError(
                f"aborting: {MAX_CONSECUTIVE_SKIPS} consecutive skipped steps "
                f"(last objective {rec.objective})")
        if log_fn is not None and (it % cfg.log_every == 0
                                   or it == cfg.iterations - 1):
            log_fn(rec)
    return TrainResult(params=params, buffers=buffers, records=records,
                       config=cfg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _decompose_chunked(images: np.ndarray, params, buffers, net_cfg,
                       chunk: int = 32):
    decs = []
    for i in range(0, len(images), chunk):
        decs.append(decompose(Tensor(images[i:i + chunk]), params, net_cfg,
                              buffers, training=False))
    return decs


def predicted_actual_view_depth(dec: Decomposition, index: int,
                                cfg: TrainConfig):
    """Rasterize one sample's predicted depth into its predicted view."""
    K = cfg.camera()
    Kp = padded_intrinsics(K)
    d = Tensor(dec.d.data[index])
    w = dec.w.data[index]
    rendered = rasterize_depth(tessellate(d, Kp), w, Kp)
    s = cfg.image_size
    r0 = s // 2
    return (rendered.depth.data[r0:r0 + s, r0:r0 + s],
            rendered.coverage[r0:r0 + s, r0:r0 + s])


def evaluate(params: dict, buffers: dict, cfg: TrainConfig,
             scenes: list[SceneSample]) -> MetricReport:
    """Actual-view depth metrics against ground truth, plus recon L1.

    Per image: scale-invariant error and normal angle error on the pixels
    where both predicted and true rasterized depths are covered (the
    normal metric erodes the mask by one pixel), and the Pearson
    correlation between the two depth maps on that mask.
    """
    if not scenes:
        raise ValueError("evaluation needs a dataset with ground truth")
    net_cfg = cfg.net_config()
    synth_cfg = cfg.synth_config()
    K = cfg.camera()
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    per_image = []
    l1_sum = 0.0
    with no_grad():
        offset = 0
        for dec in _decompose_chunked(images, params, buffers, net_cfg):
            rep = _render_batch(dec, cfg, None)
            for b in range(dec.d.shape[0]):
                i = offset + b
                d_pred, cov_pred = predicted_actual_view_depth(dec, b, cfg)
                d_gt, cov_gt = gt_actual_view_depth(scenes[i], synth_cfg)
                mask = cov_pred & cov_gt
                if mask.sum() < 16:
                    continue
                si = si_error(d_pred, d_gt, mask)
                nmask = ndimage.binary_erosion(mask)
                nerr = normal_angle_error(d_pred, d_gt, K,
                                          nmask if nmask.any() else mask)
                pear = _pearson_masked(d_pred, d_gt, mask)
                rec_l1 = float(np.abs(rep.image.data[b]
                                      - images[i]).mean())
                l1_sum += rec_l1
                per_image.append({"index": i, "si_error": si,
                                  "normal_error_deg": nerr,
                                  "depth_pearson": pear,
                                  "valid_fraction": float(mask.mean())})
            offset += dec.d.shape[0]
    if not per_image:
        raise ValueError("no evaluable images (insufficient coverage)")
    si_all = float(np.mean([r["si_error"] for r in per_image]))
    ne_all = float(np.mean([r["normal_error_deg"] for r in per_image]))
    corr_med = float(np.median([r["depth_pearson"] for r in per_image]))
    return MetricReport(si_error=si_all, normal_error_deg=ne_all,
                        depth_corr_median=corr_med, n_images=len(per_image),
                        recon_l1=l1_sum / len(per_image), per_image=per_image)


def _pearson_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    av = a[mask] - a[mask].mean()
    bv = b[mask] - b[mask].mean()
    denom = np.sqrt((av * av).sum() * (bv * bv).sum())
    if denom == 0:
        return 0.0
    return float((av * bv).sum() / denom)


def test_set_recon_l1(params, buffers, cfg: TrainConfig,
                      images: np.ndarray) -> float:
    """Mean reconstruction L1 over a held-out image set."""
    net_cfg = cfg.net_config()
    total, count = 0.0, 0
    with no_grad():
        offset = 0
        for dec in _decompose_chunked(images, params, buffers, net_cfg):
            batch = images[offset:offset + dec.d.shape[0]]
            rep = _render_batch(dec, cfg, None)
            total += float(np.abs(rep.image.data - batch).mean() * len(batch))
            count += len(batch)
            offset += len(batch)
    return total / count


def constant_depth_baseline(cfg: TrainConfig,
                            scenes: list[SceneSample]) -> float:
    """Mean si_error of the constant-midpoint-depth predictor."""
    synth_cfg = cfg.synth_config()
    lo, hi = synth_cfg.depth_range
    mid = 0.5 * (lo + hi)
    errs = []
    for s in scenes:
        d_gt, cov = gt_actual_view_depth(s, synth_cfg)
        if cov.sum() < 16:
            continue
        errs.append(si_error(np.full_like(d_gt, mid), d_gt, cov))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# single-image reconstruction and novel views
# ---------------------------------------------------------------------------

def reconstruct(params, buffers, cfg: TrainConfig, image: np.ndarray):
    """Decompose one image and re-render it (the autoencoding path)."""
    with no_grad():
        dec = decompose(Tensor(image[None].astype(np.float32)), params,
                        cfg.net_config(), buffers, training=False)
        rep = _render_batch(dec, cfg, None)
    return dec, rep


def render_views(params, buffers, cfg: TrainConfig, image: np.ndarray,
                 views: list[tuple[float, float]],
                 lights: list[tuple[float, float]] | None = None):
    """Re-render one image from substituted viewpoints and lights.

    ``views`` are (yaw_deg, pitch_deg) pairs, applied as axis-angle
    rotations with zero translation; ``lights`` optionally substitutes
    (ax_deg, ay_deg) light directions (predicted ks/kd are kept). Returns
    a list of (image, degenerate_flag).
    """
    for yaw, pitch in views:
        if abs(yaw) > 90 or abs(pitch) > 90:
            raise ValueError("view angles must lie within +-90 degrees")
    K = cfg.camera()
    Kp = padded_intrinsics(K)
    out = []
    with no_grad():
        dec = decompose(Tensor(image[None].astype(np.float32)), params,
                        cfg.net_config(), buffers, training=False)
        d, a = dec.d[0], dec.a[0]
        normals = normals_from_depth(d, Kp)
        light_list = [None] * len(views) if lights is None else list(lights)
        for (yaw, pitch), lt in zip(views, light_list):
            if lt is None:
                light = LightState(l=dec.light.l[0], ks=dec.light.ks[0],
                                   kd=dec.light.kd[0])
            else:
                light = LightState(l=light_from_angles(float(lt[0]), float(lt[1])),
                                   ks=dec.light.ks[0], kd=dec.light.kd[0])
            J = shade(a, normals, light)
            w = np.array([np.deg2rad(pitch), np.deg2rad(yaw), 0.0,
                          0.0, 0.0, 0.0])
            rep = reproject(J, d, w, K)
            out.append((rep.image.data.copy(), bool(rep.degenerate.any())))
    return out


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def save_run(out_dir, result: TrainResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ckpt",
                    pack_model(result.params, result.buffers))
    (out / "config.cfg").write_text(config_to_text(result.config))
    with open(out / "train_log.txt", "w") as fh:
        for r in result.records:
            fh.write(r.as_line() + "\n")
    with open(out / "train_log.csv", "w") as fh:
        fh.write(TRAIN_CSV_HEADER + "\n")
        for r in result.records:
            fh.write(r.as_csv() + "\n")


def load_run(run_dir) -> tuple[dict, dict, TrainConfig]:
    run = Path(run_dir)
    params, buffers = unpack_model(load_checkpoint(run / "checkpoint.ckpt"))
    cfg = load_config_file(TrainConfig(), run / "config.cfg")
    return params, buffers, cfg
