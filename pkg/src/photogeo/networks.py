"""Image decomposition networks: depth, albedo, viewpoint, and lighting.

Depth and albedo come from encoder-decoder networks without skip
connections (the decoder generates a different, canonical view, so pixel
alignment is not wanted); viewpoint and lighting share one small encoder
trunk with separate linear heads. Every raw output is squashed into its
configured range, and the spatial maps are predicted on a grid twice the
image size so the border can be cropped away after warping.

Final prediction layers start at exactly zero, so a fresh network decodes
any image to the range centers: midpoint depth, mid-gray albedo, identity
pose, and head-on light.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .photometric import LightState, light_from_angles

__all__ = [
    "NetConfig", "Decomposition", "squash_range", "init_params",
    "decompose", "parameter_names",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass
class NetConfig:
    """Architecture and output-range settings for the decomposition nets."""

    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    bottleneck: int = 128
    depth_range: tuple[float, float] = (0.4, 0.6)
    rotation_range_deg: float = 60.0
    translation_range: float = 0.1
    light_angle_range_deg: float = 60.0
    albedo_arch: str = "simple"          # "simple" | "dense"
    dense_block_convs: int = 2
    head_kernel: int = 3                 # 5 matches the full-scale recipe
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.depth_range
        if not lo < hi:
            raise ValueError("depth_range must satisfy d_min < d_max")
        if min(self.rotation_range_deg, self.translation_range,
               self.light_angle_range_deg) <= 0:
            raise ValueError("output ranges must be positive")
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ValueError("image_size must be a power of two >= 8")
        n_stages = int(np.log2(s)) - 2
        if len(self.channels) != n_stages:
            raise ValueError(f"need {n_stages} encoder channels for size {s}")
        if self.albedo_arch not in ("simple", "dense"):
            raise ValueError("albedo_arch must be 'simple' or 'dense'")
        if self.head_kernel % 2 != 1:
            raise ValueError("head_kernel must be odd")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def padded_size(self) -> int:
        return 2 * self.image_size


@dataclass
class Decomposition:
    """Network outputs for a batch: padded maps, pose, and light."""

    d: Tensor              # (B, 2S, 2S) depth, inside depth_range
    a: Tensor              # (B, 2S, 2S, 3) albedo in (0, 1)
    w: Tensor              # (B, 6) pose: axis-angle radians + translation
    light: LightState      # l (B, 3); ks, kd (B,) in (0, 1)
    light_angles: Tensor   # (B, 2) predicted light angles, degrees


def squash_range(x, lo: float, hi: float, kind: str = "tanh") -> Tensor:
    """Map raw activations into (lo, hi).

    "tanh": (lo+hi)/2 + (hi-lo)/2 * tanh(x)  (gradient (hi-lo)/2 at 0);
    "sigmoid": lo + (hi-lo) * sigmoid(x), used for the (0, 1) quantities.
    """
    if not lo < hi:
        raise ValueError("squash_range requires lo < hi")
    x = as_tensor(x)
    if kind == "tanh":
        return 0.5 * (lo + hi) + 0.5 * (hi - lo) * ad.tanh(x)
    if kind == "sigmoid":
        return lo + (hi - lo) * ad.sigmoid(x)
    raise ValueError(f"unknown squash kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _conv_init(rng, kh, kw, cin, cout, zero=False):
    if zero:
        w = np.zeros((kh, kw, cin, cout), dtype=np.float32)
    else:
        std = np.sqrt(2.0 / (kh * kw * cin))
        w = rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(np.float32)
    return w, np.zeros(cout, dtype=np.float32)


def _add_conv(params, rng, name, kh, kw, cin, cout, zero=False):
    w, b = _conv_init(rng, kh, kw, cin, cout, zero)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(b, requires_grad=True)


def _add_bn(params, buffers, name, c):
    params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
    buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)


def _add_fc(params, rng, name, din, dout, zero=False):
    if zero:
        w = np.zeros((din, dout), dtype=np.float32)
    else:
        std = np.sqrt(2.0 / din)
        w = rng.normal(0.0, std, size=(din, dout)).astype(np.float32)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)


def _decoder_channels(cfg: NetConfig) -> list[int]:
    # one 1x1 -> 4x4 stage plus n_stages+1 stride-2 upsamplers reaches the
    # padded grid (twice the input size); widths taper fast because the
    # two highest-resolution stages dominate CPU cost
    chans = list(cfg.channels[::-1])
    return chans + [max(cfg.channels[0] // 2, 4), max(cfg.channels[0] // 4, 4)]


def _build_encdec(params, buffers, rng, prefix, cfg: NetConfig, out_ch: int,
                  dense: bool = False):
    cin = 3
    for i, cout in enumerate(cfg.channels):
        _add_conv(params, rng, f"{prefix}.enc{i}", 4, 4, cin, cout)
        if i > 0:
            _add_bn(params, buffers, f"{prefix}.enc{i}.bn", cout)
        if dense:
            for k in range(cfg.dense_block_convs):
                _add_conv(params, rng, f"{prefix}.enc{i}.dense{k}", 3, 3, cout, cout)
                _add_bn(params, buffers, f"{prefix}.enc{i}.dense{k}.bn", cout)
        cin = cout
    _add_conv(params, rng, f"{prefix}.bottleneck", 4, 4, cin, cfg.bottleneck)
    _add_bn(params, buffers, f"{prefix}.bottleneck.bn", cfg.bottleneck)
    cin = cfg.bottleneck
    dec_chans = _decoder_channels(cfg)
    for i, cout in enumerate(dec_chans):
        k = 2 if i == len(dec_chans) - 1 else 4
        _add_conv(params, rng, f"{prefix}.dec{i}", k, k, cin, cout)
        _add_bn(params, buffers, f"{prefix}.dec{i}.bn", cout)
        if dense and i > 0:
            for k in range(cfg.dense_block_convs):
                _add_conv(params, rng, f"{prefix}.dec{i}.dense{k}", 3, 3, cout, cout)
                _add_bn(params, buffers, f"{prefix}.dec{i}.dense{k}.bn", cout)
        cin = cout
    k = cfg.head_kernel
    _add_conv(params, rng, f"{prefix}.head", k, k, cin, out_ch, zero=True)


def init_params(cfg: NetConfig, seed: int | None = None):
    """Seeded parameter set (dict of fp32 Tensors) plus batch-norm buffers.

    Prediction heads are zero so the initial decomposition sits exactly at
    the range centers.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    _build_encdec(params, buffers, rng, "depth", cfg, out_ch=1)
    _build_encdec(params, buffers, rng, "albedo", cfg, out_ch=3,
                  dense=(cfg.albedo_arch == "dense"))
    cin = 3
    for i, cout in enumerate(cfg.channels):
        _add_conv(params, rng, f"vl.enc{i}", 4, 4, cin, cout)
        cin = cout
    _add_conv(params, rng, "vl.bottleneck", 4, 4, cin, cfg.bottleneck)
    _add_fc(params, rng, "vl.view_head", cfg.bottleneck, 6, zero=True)
    _add_fc(params, rng, "vl.light_head", cfg.bottleneck, 4, zero=True)
    return params, buffers


def parameter_names(cfg: NetConfig) -> list[str]:
    params, _ = init_params(cfg, seed=0)
    return sorted(params)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _batchnorm(x: Tensor, params, buffers, name: str, training: bool) -> Tensor:
    gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
    if training:
        y, mu, var = ad.batchnorm_train(x, gamma, beta, _BN_EPS)
        rm, rv = buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"]
        rm += _BN_MOMENTUM * (mu.astype(rm.dtype) - rm)
        rv += _BN_MOMENTUM * (var.astype(rv.dtype) - rv)
        return y
    rm = buffers[f"{name}.running_mean"].astype(x.dtype)
    rv = buffers[f"{name}.running_var"].astype(x.dtype)
    scale = 1.0 / np.sqrt(rv + _BN_EPS)
    xn = x * Tensor(scale) - Tensor(rm * scale)
    return xn * gamma.reshape((1, 1, 1, -1)) + beta.reshape((1, 1, 1, -1))


def _conv_block(x, params, name, stride, pad, transposed=False):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    if transposed:
        return ad.conv_transpose2d(x, w, b, stride=stride, pad=pad)
    return ad.conv2d(x, w, b, stride=stride, pad=pad)


def _run_encdec(x, params, buffers, prefix, cfg: NetConfig, training: bool,
                dense: bool = False) -> Tensor:
    for i in range(cfg.n_stages):
        x = _conv_block(x, params, f"{prefix}.enc{i}", stride=2, pad=1)
        if i > 0:
            x = _batchnorm(x, params, buffers, f"{prefix}.enc{i}.bn", training)
        x = ad.leaky_relu(x, 0.2)
        if dense:
            for k in range(cfg.dense_block_convs):
                x = _conv_block(x, params, f"{prefix}.enc{i}.dense{k}", stride=1, pad=1)
                x = _batchnorm(x, params, buffers, f"{prefix}.enc{i}.dense{k}.bn", training)
                x = ad.leaky_relu(x, 0.2)
    x = _conv_block(x, params, f"{prefix}.bottleneck", stride=1, pad=0)
    x = _batchnorm(x, params, buffers, f"{prefix}.bottleneck.bn", training)
    x = ad.leaky_relu(x, 0.2)
    n_dec = len(_decoder_channels(cfg))
    for i in range(n_dec):
        if i == 0:
            stride, pad = 1, 0
        elif i == n_dec - 1:
            stride, pad = 2, 0
        else:
            stride, pad = 2, 1
        x = _conv_block(x, params, f"{prefix}.dec{i}", stride=stride, pad=pad,
                        transposed=True)
        x = _batchnorm(x, params, buffers, f"{prefix}.dec{i}.bn", training)
        x = ad.relu(x)
        if dense and i > 0:
            for k in range(cfg.dense_block_convs):
                x = _conv_block(x, params, f"{prefix}.dec{i}.dense{k}", stride=1, pad=1)
                x = _batchnorm(x, params, buffers, f"{prefix}.dec{i}.dense{k}.bn", training)
                x = ad.leaky_relu(x, 0.2)
    return _conv_block(x, params, f"{prefix}.head", stride=1,
                       pad=cfg.head_kernel // 2)


def _run_vl_trunk(x, params, cfg: NetConfig) -> Tensor:
    for i in range(cfg.n_stages):
        x = _conv_block(x, params, f"vl.enc{i}", stride=2, pad=1)
        x = ad.relu(x)
    x = _conv_block(x, params, "vl.bottleneck", stride=1, pad=0)
    x = ad.relu(x)
    return x.reshape((x.shape[0], cfg.bottleneck))


def decompose(images, params, cfg: NetConfig, buffers,
              training: bool = False) -> Decomposition:
    """Run all decomposition networks on a batch of images.

    images: (B, S, S, 3) in [0, 1] (a single (S, S, 3) image is promoted).
    Raw outputs are squashed into their configured ranges, so the result
    fields always lie strictly inside them.
    """
    x = as_tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    B, H, W, C = x.shape
    if (H, W, C) != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size}x3 input")

    d_raw = _run_encdec(x, params, buffers, "depth", cfg, training)
    a_raw = _run_encdec(x, params, buffers, "albedo", cfg, training,
                        dense=(cfg.albedo_arch == "dense"))
    S2 = cfg.padded_size
    d = squash_range(d_raw.reshape((B, S2, S2)), *cfg.depth_range)
    a = squash_range(a_raw, 0.0, 1.0, kind="sigmoid")

    feats = _run_vl_trunk(x, params, cfg)
    view_raw = ad.matmul(feats, params["vl.view_head.w"]) + params["vl.view_head.b"]
    light_raw = ad.matmul(feats, params["vl.light_head.w"]) + params["vl.light_head.b"]

    rot_rad = float(np.deg2rad(cfg.rotation_range_deg))
    rot = squash_range(view_raw[:, 0:3], -rot_rad, rot_rad)
    trans = squash_range(view_raw[:, 3:6], -cfg.translation_range,
                         cfg.translation_range)
    w = ad.concatenate([rot, trans], axis=1)

    ang = squash_range(light_raw[:, 0:2], -cfg.light_angle_range_deg,
                       cfg.light_angle_range_deg)
    ks = squash_range(light_raw[:, 2], 0.0, 1.0, kind="sigmoid")
    kd = squash_range(light_raw[:, 3], 0.0, 1.0, kind="sigmoid")
    light = LightState(l=light_from_angles(ang[:, 0], ang[:, 1]), ks=ks, kd=kd)

    if np.any(~np.isfinite(d.data)) or np.any(~np.isfinite(a.data)) \
            or np.any(~np.isfinite(w.data)):
        raise FloatingPointError("non-finite activations in decomposition")
    return Decomposition(d=d, a=a, w=w, light=light, light_angles=ang)
