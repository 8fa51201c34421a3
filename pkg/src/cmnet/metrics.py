"""Matting quality metrics on whole images: SAD, MSE, Grad, Conn and
foreground MSE, with the usual reporting scales."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ShapeError

SAD_SCALE = 1e-3
MSE_SCALE = 1e3
GRAD_SCALE = 1e-3
CONN_SCALE = 1e-3
GRAD_SIGMA = 1.4
GRAD_TRUNCATE = 4.0
CONN_STEP = 0.1
CONN_TOLERANCE = 0.15


class EmptyMaskWarning(UserWarning):
    pass


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _alpha_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def _plane(a: np.ndarray) -> np.ndarray:
    """Drop leading singleton axes so a (1, 1, H, W) matte becomes (H, W)."""
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a single alpha plane, got {a.shape}")
    return a


def sad(pred, gt) -> float:
    p, g = _alpha_pair(pred, gt)
    return float(np.abs(p - g).sum() * SAD_SCALE)


def mse(pred, gt) -> float:
    p, g = _alpha_pair(pred, gt)
    if p.size == 0:
        raise ShapeError("empty input")
    return float(np.mean((p - g) ** 2) * MSE_SCALE)


def _gaussian_factors(sigma: float = GRAD_SIGMA, truncate: float = GRAD_TRUNCATE):
    """Smoothing and derivative taps whose outer product is the unit-norm
    d/dx filter."""
    half = int(math.ceil(truncate * sigma))
    r = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-r * r / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
    dg = -r * g / (sigma * sigma)
    norm = math.sqrt(np.sum(g * g) * np.sum(dg * dg))
    return g, dg / norm


def gaussian_gradient_kernels(sigma: float = GRAD_SIGMA, truncate: float = GRAD_TRUNCATE):
    """First-order Gaussian derivative filters (d/dx, d/dy), unit L2 norm."""
    g, dg = _gaussian_factors(sigma, truncate)
    hx = np.outer(g, dg)
    return hx, hx.T.copy()


def _derivative(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Correlate with the antisymmetric kernel ``k`` as a sum of differences
    ``k[half + r] * (a[i + r] - a[i - r])`` so flat regions give exactly 0."""
    half = k.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    ap = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for r in range(1, half + 1):
        hi = np.take(ap, np.arange(half + r, half + r + n), axis=axis)
        lo = np.take(ap, np.arange(half - r, half - r + n), axis=axis)
        out += k[half + r] * (hi - lo)
    return out


def gradient_magnitude(a: np.ndarray, sigma: float = GRAD_SIGMA) -> np.ndarray:
    g, dg = _gaussian_factors(sigma)
    gx = _derivative(ndimage.correlate1d(a, g, axis=0, mode="nearest"), dg, axis=1)
    gy = _derivative(ndimage.correlate1d(a, g, axis=1, mode="nearest"), dg, axis=0)
    return np.sqrt(gx * gx + gy * gy)


def grad_metric(pred, gt, sigma: float = GRAD_SIGMA) -> float:
    p, g = _alpha_pair(pred, gt)
    p, g = _plane(p), _plane(g)
    diff = gradient_magnitude(p, sigma) - gradient_magnitude(g, sigma)
    return float(np.sum(diff * diff) * GRAD_SCALE)


def conn_thresholds(step: float = CONN_STEP) -> list[float]:
    n = int(round(1.0 / step))
    return [k / n for k in range(1, n)]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected foreground component; ties go to the component met
    first in column-major scan order."""
    # labelling the transpose numbers components in column-major order
    labels, count = ndimage.label(mask.T)
    if count == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    best = int(np.argmax(sizes)) + 1
    return (labels == best).T


def connectivity_levels(p: np.ndarray, g: np.ndarray, step: float = CONN_STEP) -> np.ndarray:
    """Per-pixel level just below the first threshold at which the pixel leaves
    the largest jointly-thresholded component; 1 if it never does."""
    level = np.full(p.shape, -1.0)
    prev = 0.0
    for theta in conn_thresholds(step):
        omega = _largest_component((p >= theta) & (g >= theta))
        level[(level == -1.0) & ~omega] = prev
        prev = theta
    level[level == -1.0] = 1.0
    return level


def conn_metric(pred, gt, step: float = CONN_STEP, tolerance: float = CONN_TOLERANCE) -> float:
    p, g = _alpha_pair(pred, gt)
    p, g = _plane(p), _plane(g)
    level = connectivity_levels(p, g, step)
    dp = p - level
    dg = g - level
    phi_p = 1.0 - dp * (dp >= tolerance)
    phi_g = 1.0 - dg * (dg >= tolerance)
    return math.fsum(np.abs(phi_p - phi_g).ravel().tolist()) * CONN_SCALE


def fg_mse(pred_fg, gt_fg, gt_alpha) -> float:
    """Foreground MSE over pixels with ``gt_alpha > 0``; 0 with a warning if none."""
    pf, gf = _alpha_pair(pred_fg, gt_fg)
    a = _plane(_array(gt_alpha))
    if pf.shape[-2:] != a.shape:
        raise ShapeError(f"alpha {a.shape} does not match foreground {pf.shape}")
    mask = a > 0
    if not mask.any():
        warnings.warn("foreground MSE over an empty alpha support", EmptyMaskWarning, stacklevel=2)
        return 0.0
    d = (pf - gf).reshape(-1, *a.shape)[:, mask]
    return float(np.mean(d * d) * MSE_SCALE)


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    fg_mse: float = 0.0
    fg_empty: bool = False

    SCALES = {"sad": SAD_SCALE, "mse": MSE_SCALE, "grad": GRAD_SCALE,
              "conn": CONN_SCALE, "fg_mse": MSE_SCALE}

    def to_mapping(self) -> dict:
        out = {k: repr(v) if isinstance(v, float) else int(v) for k, v in asdict(self).items()}
        out.update({f"scale.{k}": repr(v) for k, v in self.SCALES.items()})
        return out


def evaluate_frame(pred_alpha, gt_alpha, pred_fg=None, gt_fg=None) -> MetricReport:
    pa, ga = _plane(_array(pred_alpha)), _plane(_array(gt_alpha))
    report = MetricReport(sad(pa, ga), mse(pa, ga), grad_metric(pa, ga), conn_metric(pa, ga))
    if pred_fg is not None and gt_fg is not None:
        report.fg_empty = not bool((ga > 0).any())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyMaskWarning)
            report.fg_mse = fg_mse(pred_fg, gt_fg, ga)
    return report


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Video-level report: per-field mean over frames."""
    if not reports:
        raise ShapeError("no frames to average")
    values = {}
    for f in fields(MetricReport):
        col = [getattr(r, f.name) for r in reports]
        values[f.name] = any(col) if f.type in (bool, "bool") else float(np.mean(col))
    return MetricReport(**values)


def evaluate_video(pred_alpha, gt_alpha, pred_fg=None, gt_fg=None) -> MetricReport:
    n = len(gt_alpha)
    if len(pred_alpha) != n:
        raise ShapeError(f"{len(pred_alpha)} predicted frames for {n} ground-truth frames")
    reports = []
    for t in range(n):
        pf = None if pred_fg is None else pred_fg[t]
        gf = None if gt_fg is None else gt_fg[t]
        reports.append(evaluate_frame(pred_alpha[t], gt_alpha[t], pf, gf))
    return mean_report(reports)
