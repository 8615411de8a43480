"""Procedural bilaterally-symmetric scenes rendered by the engine itself.

Each scene is a mirrored Gaussian-bump heightfield with a mirrored color
field, posed and lit uniformly inside the configured ranges, and rendered
through the exact forward model the trainer uses. Ground-truth factors
are therefore available and re-rendering from them reproduces the stored
image bit for bit.

Also holds the plain-image ingestion helpers (folder loading, dataset
splitting) and the on-disk scene archive format: one directory per sample
with PNG rasters plus a key=value manifest of the ground-truth factors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import Tensor, no_grad
from .camera import Intrinsics, intrinsics_from_fov, padded_intrinsics
from .photometric import LightState, hflip, normals_from_depth, shade
from .renderer import rasterize_depth, reproject, tessellate

__all__ = [
    "SynthConfig", "SceneSample", "DatasetSplit", "generate_scene",
    "generate_dataset", "split_dataset", "load_image_folder",
    "save_scene_archive", "load_scene_archive", "gt_actual_view_depth",
]


@dataclass(frozen=True)
class SynthConfig:
    """Scene generator ranges; pose and light stay inside the model ranges."""

    image_size: int = 32
    fov_deg: float = 25.0
    depth_range: tuple[float, float] = (0.4, 0.6)
    bump_count: tuple[int, int] = (2, 6)
    bump_amplitude: float = 0.09
    rotation_max_deg: float = 12.0
    translation_max: float = 0.04
    light_angle_max_deg: float = 60.0
    ks_range: tuple[float, float] = (0.15, 0.45)
    kd_range: tuple[float, float] = (0.55, 0.95)

    def camera(self) -> Intrinsics:
        return intrinsics_from_fov(self.image_size, self.image_size, self.fov_deg)


@dataclass
class SceneSample:
    """Ground-truthed scene: stored image plus the factors that made it."""

    image: np.ndarray        # (S, S, 3) float64 in [0, ~1.4)
    d_gt: np.ndarray         # (2S, 2S) canonical depth
    a_gt: np.ndarray         # (2S, 2S, 3) canonical albedo
    w_gt: np.ndarray         # (6,) pose
    light_ax: float
    light_ay: float
    ks: float
    kd: float
    seed: int

    def light_gt(self) -> LightState:
        return LightState.from_angles(self.light_ax, self.light_ay,
                                      self.ks, self.kd)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple[float, float, float]


def _symmetrize(x: np.ndarray) -> np.ndarray:
    # (a + flip(a)) / 2 is bit-exactly mirror symmetric: IEEE addition
    # commutes, so flipping the result reproduces it.
    return 0.5 * (x + np.flip(x, axis=1 if x.ndim == 2 else -2))


def _bump_field(rng, n: int, count: tuple[int, int], amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    field = np.zeros((n, n))
    k = int(rng.integers(count[0], count[1] + 1))
    for _ in range(k):
        cx = rng.uniform(0.1, 0.9) * (n - 1)
        cy = rng.uniform(0.1, 0.9) * (n - 1)
        sig = rng.uniform(0.08, 0.25) * n
        a = rng.uniform(0.35, 1.0) * amp * (1 if rng.random() < 0.5 else -1)
        field += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
    return field


def _color_field(rng, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.empty((n, n, 3))
    for c in range(3):
        chan = np.full((n, n), rng.uniform(0.35, 0.65))
        for _ in range(2):
            cx, cy = rng.uniform(0, n - 1, 2)
            sig = rng.uniform(0.15, 0.4) * n
            chan += rng.uniform(-0.3, 0.3) * np.exp(
                -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
        fx, fy = rng.uniform(1.0, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        chan += rng.uniform(0.04, 0.12) * np.sin(
            2 * np.pi * (fx * xx + fy * yy) / n + phase)
        img[..., c] = chan
    return img


def generate_scene(seed: int, cfg: SynthConfig = SynthConfig()) -> SceneSample:
    """One seeded, symmetric, ground-truthed scene rendered by the engine."""
    rng = np.random.default_rng(seed)
    n = 2 * cfg.image_size
    lo, hi = cfg.depth_range
    margin = 0.02 * (hi - lo)

    depth = (lo + hi) / 2.0 + _bump_field(rng, n, cfg.bump_count, cfg.bump_amplitude)
    depth = _symmetrize(depth)
    depth = np.clip(depth, lo + margin, hi - margin)

    albedo = _symmetrize(_color_field(rng, n))
    amin, amax = albedo.min(), albedo.max()
    if amax - amin < 1e-9:
        albedo = np.full_like(albedo, 0.5)
    else:
        albedo = 0.1 + 0.8 * (albedo - amin) / (amax - amin)

    rot = np.deg2rad(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg, 3))
    trans = rng.uniform(-cfg.translation_max, cfg.translation_max, 3)
    w = np.concatenate([rot, trans])
    ax = rng.uniform(-cfg.light_angle_max_deg, cfg.light_angle_max_deg)
    ay = rng.uniform(-cfg.light_angle_max_deg, cfg.light_angle_max_deg)
    ks = rng.uniform(*cfg.ks_range)
    kd = rng.uniform(*cfg.kd_range)

    K = cfg.camera()
    with no_grad():
        light = LightState.from_angles(ax, ay, ks, kd)
        normals = normals_from_depth(Tensor(depth), padded_intrinsics(K))
        J = shade(Tensor(albedo), normals, light)
        rep = reproject(J, Tensor(depth), w, K)
    return SceneSample(image=rep.image.data, d_gt=depth, a_gt=albedo,
                       w_gt=w, light_ax=float(ax), light_ay=float(ay),
                       ks=float(ks), kd=float(kd), seed=int(seed))


def generate_dataset(count: int, cfg: SynthConfig = SynthConfig(),
                     base_seed: int = 0) -> list[SceneSample]:
    return [generate_scene(base_seed + i, cfg) for i in range(count)]


def gt_actual_view_depth(sample: SceneSample, cfg: SynthConfig):
    """Ground-truth depth in the actual view (rasterized, center-cropped)."""
    K = cfg.camera()
    Kp = padded_intrinsics(K)
    with no_grad():
        rendered = rasterize_depth(tessellate(Tensor(sample.d_gt), Kp),
                                   sample.w_gt, Kp)
    s = cfg.image_size
    r0 = s // 2
    depth = rendered.depth.data[r0:r0 + s, r0:r0 + s]
    cov = rendered.coverage[r0:r0 + s, r0:r0 + s]
    return depth, cov


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def split_dataset(dataset: list, ratios: tuple[float, float, float],
                  seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test partition.

    Floor rounding with the remainder assigned to train; every part must
    end up with at least one sample.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("all three split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(dataset)
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} samples leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [dataset[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train],
                        val=shuffled[n_train:n_train + n_val],
                        test=shuffled[n_train + n_val:],
                        ratios=ratios)


def load_image_folder(path, size: int) -> np.ndarray:
    """Load a folder of images: lexicographic order, center crop, resize.

    Returns (N, size, size, 3) float32 in [0, 1]. Undecodable files are
    skipped with a warning; an empty result is an error.
    """
    folder = Path(path)
    if not folder.is_dir():
        raise ValueError(f"not a directory: {folder}")
    out = []
    for p in sorted(folder.iterdir()):
        if not p.is_file():
            continue
        try:
            with Image.open(p) as im:
                im = im.convert("RGB")
                side = min(im.size)
                left = (im.width - side) // 2
                top = (im.height - side) // 2
                im = im.crop((left, top, left + side, top + side))
                im = im.resize((size, size), Image.BILINEAR)
                out.append(np.asarray(im, dtype=np.float32) / 255.0)
        except (UnidentifiedImageError, OSError) as err:
            warnings.warn(f"skipping undecodable image {p.name}: {err}")
    if not out:
        raise ValueError(f"no decodable images in {folder}")
    return np.stack(out)


# ---------------------------------------------------------------------------
# scene archives
# ---------------------------------------------------------------------------

def _save_png01(path, arr: np.ndarray) -> None:
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def _save_png16(path, arr01: np.ndarray) -> None:
    q = np.clip(np.round(arr01 * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path)


def save_scene_archive(dataset: list[SceneSample], out_dir,
                       cfg: SynthConfig) -> None:
    """Write scenes as per-sample directories of PNGs plus manifests.

    Images and albedo quantize to 8-bit RGB, depth to 16-bit grayscale
    over the configured depth range; the manifest records exact pose and
    light factors (see the README for the key=value schema).
    """
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    lo, hi = cfg.depth_range
    for i, s in enumerate(dataset):
        d = base / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        _save_png01(d / "image.png", np.clip(s.image, 0.0, 1.0))
        _save_png01(d / "albedo.png", s.a_gt)
        _save_png16(d / "depth.png", (s.d_gt - lo) / (hi - lo))
        pose = ",".join(f"{v:.17g}" for v in s.w_gt)
        lines = [
            f"seed={s.seed}",
            f"image_size={cfg.image_size}",
            f"depth_min={lo:.17g}",
            f"depth_max={hi:.17g}",
            f"pose={pose}",
            f"light_ax={s.light_ax:.17g}",
            f"light_ay={s.light_ay:.17g}",
            f"ks={s.ks:.17g}",
            f"kd={s.kd:.17g}",
        ]
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_scene_archive(path) -> tuple[list[SceneSample], SynthConfig]:
    """Read a scene archive; factors are exact, rasters are quantized."""
    base = Path(path)
    dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"no samples under {base}")
    samples = []
    size = None
    lo = hi = None
    for d in dirs:
        kv = dict(line.split("=", 1)
                  for line in (d / "manifest.txt").read_text().splitlines() if line)
        lo, hi = float(kv["depth_min"]), float(kv["depth_max"])
        size = int(kv["image_size"])
        with Image.open(d / "image.png") as im:
            image = np.asarray(im, dtype=np.float64) / 255.0
        with Image.open(d / "albedo.png") as im:
            albedo = np.asarray(im, dtype=np.float64) / 255.0
        with Image.open(d / "depth.png") as im:
            draw = np.asarray(im, dtype=np.float64) / 65535.0
        samples.append(SceneSample(
            image=image, d_gt=lo + draw * (hi - lo), a_gt=albedo,
            w_gt=np.array([float(v) for v in kv["pose"].split(",")]),
            light_ax=float(kv["light_ax"]), light_ay=float(kv["light_ay"]),
            ks=float(kv["ks"]), kd=float(kv["kd"]), seed=int(kv["seed"])))
    return samples, SynthConfig(image_size=size, depth_range=(lo, hi))
