"""Central finite-difference gradient oracle.

``grad_check`` compares the tape's analytic gradient of a scalar-valued
function against central differences evaluated coordinate by coordinate.
It is the reference every differentiable primitive in the engine is
verified against; run the full registered suite via the ``gradcheck``
CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    worst_index: tuple[int, ...] | None = None
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None
    nonfinite_coords: list[tuple[int, ...]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Check d f / d x against central differences.

    f must map a Tensor to a scalar Tensor. Relative error per coordinate
    uses an absolute floor of 1e-8 in the denominator; the check passes iff
    the max over coordinates is below ``tol``. Non-finite function values
    at a probe point are reported with the offending coordinate.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.copy()

    numeric = np.zeros_like(x0)
    nonfinite: list[tuple[int, ...]] = []
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            nonfinite.append(np.unravel_index(i, x0.shape))
            continue
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=(max_rel < tol) and not nonfinite,
        tol=tol,
        worst_index=np.unravel_index(worst, x0.shape) if x0.size else None,
        analytic=analytic,
        numeric=numeric,
        nonfinite_coords=nonfinite,
    )
