"""Depth evaluation metrics and the serializable metric report.

Depth accuracy is scored in the actual view: the scale-invariant error is
the standard deviation of per-pixel log depth ratios (immune to global
rescaling), the normal error is the mean angle between normals derived
from predicted and true depth, and the keypoint score is a per-face
Pearson correlation scaled to the 0..66 convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .camera import Intrinsics
from .photometric import normals_from_depth

__all__ = [
    "si_error", "normal_angle_error", "keypoint_depth_correlation",
    "MetricReport", "METRIC_CSV_HEADER",
]

METRIC_CSV_HEADER = "index,si_error,normal_error_deg,depth_pearson,valid_fraction"


def _masked(arr: np.ndarray, mask) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return arr[np.asarray(mask, dtype=bool)] if mask is not None else arr.reshape(-1)


def si_error(d, d_star, mask=None) -> float:
    """Scale-invariant depth error: std of log(d) - log(d*) over the mask."""
    dv = _masked(np.asarray(d, dtype=np.float64), mask)
    gv = _masked(np.asarray(d_star, dtype=np.float64), mask)
    if dv.shape != gv.shape:
        raise ValueError("depth maps must share a shape")
    if dv.size == 0:
        raise ValueError("empty evaluation mask")
    if np.any(dv <= 0) or np.any(gv <= 0):
        raise ValueError("depths must be strictly positive on the mask")
    delta = np.log(dv) - np.log(gv)
    return float(np.sqrt(np.mean((delta - delta.mean()) ** 2)))


def normal_angle_error(d, d_star, K: Intrinsics, mask=None) -> float:
    """Mean angle (degrees) between normals of predicted and true depth."""
    with no_grad():
        n_pred = normals_from_depth(Tensor(np.asarray(d, dtype=np.float64)), K).data
        n_true = normals_from_depth(Tensor(np.asarray(d_star, dtype=np.float64)), K).data
    dot = np.clip(np.sum(n_pred * n_true, axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dot))
    vals = _masked(ang, mask)
    if vals.size == 0:
        raise ValueError("empty evaluation mask")
    return float(vals.mean())


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        raise ValueError("zero variance in keypoint depths")
    return float((a * b).sum() / denom)


def keypoint_depth_correlation(pred_depth_at_keypoints,
                               gt_depth_at_keypoints) -> float:
    """Keypoint depth score: n_keypoints * mean per-face Pearson correlation.

    Accepts one face (n_kp,) or a stack of faces (n_faces, n_kp); a perfect
    prediction over 66 keypoints scores 66, anti-correlation scores the
    negated maximum. The score is invariant to positive affine rescaling
    of the predictions. Cross-paper comparability of the aggregation is
    documented, not claimed.
    """
    pred = np.asarray(pred_depth_at_keypoints, dtype=np.float64)
    gt = np.asarray(gt_depth_at_keypoints, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("keypoint lists must have equal length")
    if pred.ndim == 1:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 2 or pred.shape[1] < 3:
        raise ValueError("need at least 3 keypoints per face")
    rs = [_pearson(p, g) for p, g in zip(pred, gt)]
    return float(pred.shape[1] * np.mean(rs))


@dataclass
class MetricReport:
    """Aggregate depth metrics plus a per-image breakdown.

    ``per_image`` rows are dicts with the METRIC_CSV_HEADER fields.
    """

    si_error: float
    normal_error_deg: float
    depth_corr_median: float
    n_images: int
    recon_l1: float = float("nan")
    per_image: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"si_error={self.si_error:.10g}",
            f"normal_error_deg={self.normal_error_deg:.10g}",
            f"depth_corr_median={self.depth_corr_median:.10g}",
            f"recon_l1={self.recon_l1:.10g}",
            f"n_images={self.n_images}",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = [METRIC_CSV_HEADER]
        for r in self.per_image:
            rows.append(f"{r['index']},{r['si_error']:.10g},"
                        f"{r['normal_error_deg']:.10g},{r['depth_pearson']:.10g},"
                        f"{r['valid_fraction']:.10g}")
        return "\n".join(rows) + "\n"

    def save(self, txt_path, csv_path) -> None:
        with open(txt_path, "w") as fh:
            fh.write(self.to_text())
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_text_and_csv(cls, txt: str, csv: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in txt.strip().splitlines())
        per_image = []
        lines = csv.strip().splitlines()
        if lines and lines[0] != METRIC_CSV_HEADER:
            raise ValueError("unexpected metric table header")
        for line in lines[1:]:
            idx, si, ne, dp, vf = line.split(",")
            per_image.append({"index": int(idx), "si_error": float(si),
                              "normal_error_deg": float(ne),
                              "depth_pearson": float(dp),
                              "valid_fraction": float(vf)})
        return cls(si_error=float(kv["si_error"]),
                   normal_error_deg=float(kv["normal_error_deg"]),
                   depth_corr_median=float(kv["depth_corr_median"]),
                   n_images=int(kv["n_images"]),
                   recon_l1=float(kv.get("recon_l1", "nan")),
                   per_image=per_image)
