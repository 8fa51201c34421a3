"""Sequence-level augmentation: shared crop, horizontal flip, foreground colour
jitter, alpha gamma, recompositing and an optional noise stage."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from skimage import color

from ..errors import UsageError
from ..rng import make_rng
from .synth import FrameSequence, composite


@dataclass
class AugmentConfig:
    brightness: tuple[float, float] = (0.85, 1.15)
    contrast: tuple[float, float] = (0.85, 1.15)
    saturation: tuple[float, float] = (0.7, 1.3)
    # multiplicative-style range; the hue shift in turns is (value - 1)
    hue: tuple[float, float] = (0.9, 1.1)
    gamma: tuple[float, float] = (0.2, 2.0)
    flip_p: float = 0.5
    # stand-in for codec artefacts; 0 disables
    noise_sigma: float = 0.0

    @classmethod
    def identity(cls) -> "AugmentConfig":
        one = (1.0, 1.0)
        return cls(one, one, one, one, one, 0.0, 0.0)


def _draw(rng, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return lo if lo == hi else float(rng.uniform(lo, hi))


def jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float,
           hue_shift: float) -> np.ndarray:
    """Colour jitter on a (3, H, W) image; factors equal to 1 (shift 0) are skipped."""
    out = img
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]).mean()
        out = np.clip((out - gray) * contrast + gray, 0.0, 1.0)
    if saturation != 1.0 or hue_shift != 0.0:
        hsv = color.rgb2hsv(np.moveaxis(out, 0, -1))
        hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        out = np.clip(np.moveaxis(color.hsv2rgb(hsv), -1, 0), 0.0, 1.0)
    return out


def flip_flow(flow: np.ndarray) -> np.ndarray:
    out = flow[..., ::-1].copy()
    out[0] = -out[0]
    return out


def add_noise(img: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma <= 0:
        return img
    if sigma > 2.0 / 255.0:
        raise UsageError("noise sigma above 2/255")
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def augment(seq: FrameSequence, seed: int, crop: int | tuple[int, int],
            cfg: AugmentConfig | None = None) -> FrameSequence:
    cfg = cfg or AugmentConfig()
    ch, cw = (crop, crop) if isinstance(crop, int) else crop
    h, w = seq.size
    if ch < 1 or cw < 1 or ch > h or cw > w:
        raise UsageError(f"crop {ch}x{cw} does not fit a {h}x{w} sequence")
    rng = make_rng(seed, "augment")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < cfg.flip_p)
    b = _draw(rng, cfg.brightness)
    c = _draw(rng, cfg.contrast)
    s = _draw(rng, cfg.saturation)
    hue_shift = _draw(rng, cfg.hue) - 1.0
    gamma = _draw(rng, cfg.gamma)

    def geo(arrs, is_flow=False):
        if arrs is None:
            return None
        out = []
        for a in arrs:
            a = a[..., y0:y0 + ch, x0:x0 + cw]
            if flip:
                a = flip_flow(a) if is_flow else a[..., ::-1]
            out.append(np.ascontiguousarray(a))
        return out

    res = replace(seq, frames=geo(seq.frames), alpha=geo(seq.alpha), fg=geo(seq.fg),
                  bg=geo(seq.bg), flow=geo(seq.flow, True), occlusion=geo(seq.occlusion),
                  meta=dict(seq.meta))
    colour = (b, c, s, hue_shift) != (1.0, 1.0, 1.0, 0.0)
    if gamma != 1.0 and res.alpha is not None:
        res.alpha = [np.power(a, gamma) for a in res.alpha]
    can_recomposite = res.fg is not None and res.bg is not None and res.alpha is not None
    if colour:
        if can_recomposite:
            res.fg = [jitter(f, b, c, s, hue_shift) for f in res.fg]
        else:
            res.frames = [jitter(f, b, c, s, hue_shift) for f in res.frames]
    if can_recomposite and (colour or gamma != 1.0):
        res.frames = [composite(f, g, a) for f, g, a in zip(res.fg, res.bg, res.alpha)]
    if cfg.noise_sigma > 0:
        res.frames = [add_noise(f, cfg.noise_sigma, rng) for f in res.frames]
    res.meta.update(aug_seed=seed, aug_crop=f"{y0},{x0},{ch},{cw}", aug_flip=int(flip),
                    aug_gamma=f"{gamma:.6f}")
    return res
