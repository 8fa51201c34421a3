"""Training losses: alpha L1, Laplacian-pyramid L1 and masked foreground L1.

All L1 terms are per-element means, so magnitudes do not depend on the crop
size. Frame totals weight the foreground term by 0.1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import Tensor

PYRAMID_LEVELS = 5
FG_WEIGHT = 0.1
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def alpha_l1(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"alpha shapes differ: {pred.shape} vs {gt.shape}")
    return T.l1_against(pred, gt)


def _blur_kernel(c: int, precision: str) -> Tensor:
    k2 = np.outer(_BINOMIAL, _BINOMIAL)
    w = np.zeros((c, c, 5, 5))
    for i in range(c):
        w[i, i] = k2
    return Tensor(w, precision=precision)


def pyr_down(x: Tensor) -> Tensor:
    """Blur with the 5-tap binomial kernel (reflect border), keep even pixels."""
    return T.conv2d(T.pad_reflect(x, 2), _blur_kernel(x.shape[1], x.precision), None, stride=2)


def pyr_up(x: Tensor, h: int, w: int) -> Tensor:
    return T.bilinear_resize(x, h, w)


def laplacian_pyramid(x: Tensor, levels: int = PYRAMID_LEVELS) -> list[Tensor]:
    """Band-pass levels fine to coarse; the last entry is the Gaussian residual."""
    _, _, h, w = x.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ShapeError(f"{h}x{w} not divisible by {div} for a {levels}-level pyramid")
    bands = []
    g = x
    for _ in range(levels - 1):
        down = pyr_down(g)
        bands.append(T.sub(g, pyr_up(down, g.shape[2], g.shape[3])))
        g = down
    bands.append(g)
    return bands


def rebuild(bands: list[Tensor]) -> Tensor:
    x = bands[-1]
    for band in reversed(bands[:-1]):
        x = T.add(pyr_up(x, band.shape[2], band.shape[3]), band)
    return x


def lap_loss(pred: Tensor, gt: Tensor, levels: int = PYRAMID_LEVELS) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"alpha shapes differ: {pred.shape} vs {gt.shape}")
    total = None
    for i, (a, b) in enumerate(zip(laplacian_pyramid(pred, levels), laplacian_pyramid(gt, levels))):
        term = T.affine(T.l1_against(a, b), float(2 ** i))
        total = term if total is None else T.add(total, term)
    return total


def fg_l1(pred_fg: Tensor, gt_fg: Tensor, gt_alpha: Tensor) -> Tensor:
    """Mean |pred - gt| over colour samples where the true alpha is positive."""
    if pred_fg.shape != gt_fg.shape:
        raise ShapeError(f"foreground shapes differ: {pred_fg.shape} vs {gt_fg.shape}")
    n, c, h, w = pred_fg.shape
    if gt_alpha.shape != (n, 1, h, w):
        raise ShapeError(f"alpha {gt_alpha.shape} does not match foreground {pred_fg.shape}")
    mask = np.broadcast_to(gt_alpha.data > 0, pred_fg.shape).astype(pred_fg.data.dtype)
    count = int(mask.sum())
    if count == 0:
        return T.zeros((1, 1, 1, 1), pred_fg.precision)
    m = Tensor._wrap(np.ascontiguousarray(mask), False)
    raw = T.l1_against(T.mul(pred_fg, m), T.mul(gt_fg, m))
    return T.affine(raw, mask.size / count)


@dataclass
class LossBreakdown:
    l1_alpha: Tensor
    lap_alpha: Tensor
    l1_fg: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l1a": self.l1_alpha.item(),
            "lap": self.lap_alpha.item(),
            "l1fg": self.l1_fg.item(),
            "loss": self.total.item(),
        }


def frame_terms(pred_alpha: Tensor, pred_fg: Tensor, gt_alpha: Tensor, gt_fg: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return alpha_l1(pred_alpha, gt_alpha), lap_loss(pred_alpha, gt_alpha), fg_l1(pred_fg, gt_fg, gt_alpha)


def _sum(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def total_loss(per_frame: list[tuple[Tensor, Tensor, Tensor]]) -> LossBreakdown:
    """Sum ``l1a + lap + 0.1 * l1fg`` over frames."""
    if not per_frame:
        raise UsageError("total_loss needs at least one frame")
    l1a = _sum([f[0] for f in per_frame])
    lap = _sum([f[1] for f in per_frame])
    l1fg = _sum([f[2] for f in per_frame])
    total = T.add(T.add(l1a, lap), T.affine(l1fg, FG_WEIGHT))
    return LossBreakdown(l1a, lap, l1fg, total)
