"""Synthetic matting sequences: feathered textured sprites over a scrolling
textured background, composited with ``I = alpha*F + (1 - alpha)*B``.

All motion is integer-pixel translation, so the emitted backward flow is
exact wherever a pixel's layer is visible in both frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from ..errors import ValidationError
from ..rng import make_rng


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Blend ``fg`` over ``bg``; ``alpha`` broadcasts over colour channels."""
    fg = np.asarray(fg)
    bg = np.asarray(bg)
    alpha = np.asarray(alpha)
    if fg.shape != bg.shape:
        raise ValidationError(f"fg {fg.shape} and bg {bg.shape} differ")
    if alpha.shape[-2:] != fg.shape[-2:]:
        raise ValidationError(f"alpha {alpha.shape} does not match image {fg.shape}")
    if alpha.size and (alpha.min() < 0 or alpha.max() > 1):
        raise ValidationError("alpha outside [0, 1]")
    return alpha * fg + (1.0 - alpha) * bg


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    frames: int = 3
    min_sprites: int = 1
    max_sprites: int = 2
    max_shift: int = 4
    feather: tuple[float, float] = (1.0, 3.0)
    occlusion: bool = True
    # 0: sprite colours independent of the background, 1: same palette
    camouflage: float = 0.0
    # frames before this index show sprites in the fixed CUE_PALETTE, which no
    # background can produce; later frames use the (camouflaged) sprite palette
    cue_frames: int = 0
    texture_sigma: float = 2.0


@dataclass
class FrameSequence:
    """Per-frame arrays are channel-first: frames/fg/bg (3,H,W), alpha (1,H,W),
    flow (2,H,W), occlusion (H,W) bool."""

    frames: list[np.ndarray]
    alpha: list[np.ndarray] | None = None
    fg: list[np.ndarray] | None = None
    flow: list[np.ndarray] | None = None
    bg: list[np.ndarray] | None = None
    occlusion: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]

    def validate(self) -> None:
        n = len(self.frames)
        if n < 1:
            raise ValidationError("a sequence needs at least one frame")
        hw = self.size
        for name in ("alpha", "fg", "flow", "bg", "occlusion"):
            arrs = getattr(self, name)
            if arrs is None:
                continue
            if len(arrs) != n:
                raise ValidationError(f"{name} has {len(arrs)} entries for {n} frames")
            for a in arrs:
                if a.shape[-2:] != hw:
                    raise ValidationError(f"{name} entry {a.shape} does not match {hw}")
        if self.alpha is not None:
            for a in self.alpha:
                if a.min() < 0 or a.max() > 1:
                    raise ValidationError("alpha outside [0, 1]")
        if self.flow is not None and np.any(self.flow[0] != 0):
            raise ValidationError("flow of the first frame must be zero")


# saturated magenta: outside the [0.2, 0.8] base range of every random palette
CUE_PALETTE = (np.array([0.95, 0.05, 0.95]), np.array([0.03, 0.03, 0.03]))


def _palette(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.2, 0.8, size=3)
    amp = rng.uniform(0.08, 0.2, size=3)
    return base, amp


def _texture(rng, h: int, w: int, palette, sigma: float) -> np.ndarray:
    base, amp = palette
    tex = np.empty((3, h, w))
    for c in range(3):
        coarse = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma * 3, mode="wrap")
        fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
        field_ = coarse / (coarse.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
        tex[c] = base[c] + amp[c] * field_
    return np.clip(tex, 0.0, 1.0)


def _sprite_alpha(rng, size: int, feather: float) -> np.ndarray:
    """Ellipse with a Gaussian edge profile: alpha is the normal CDF of the
    signed distance to the outline, with standard deviation ``feather / 2``."""
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
    margin = 2.0 * feather + 1.0
    ry = rng.uniform(0.7, 1.0) * (size / 2.0 - margin)
    rx = rng.uniform(0.7, 1.0) * (size / 2.0 - margin)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (c * xx + s * yy) / rx
    v = (-s * xx + c * yy) / ry
    hard = u * u + v * v <= 1.0
    # pixel centres sit half a pixel inside/outside the outline at the boundary
    dist = np.where(hard, ndimage.distance_transform_edt(hard) - 0.5,
                    0.5 - ndimage.distance_transform_edt(~hard))
    soft = 0.5 * special.erfc(-dist / (0.5 * feather * np.sqrt(2.0)))
    soft[soft < 1e-3] = 0.0
    soft[soft > 1.0 - 1e-3] = 1.0
    return soft


def _place(template: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Paste a (c, s, s) template at integer offset into a zero (c, h, w) canvas."""
    c, sh, sw = template.shape
    out = np.zeros((c, h, w))
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + sh, h), min(left + sw, w)
    if y1 > y0 and x1 > x0:
        out[:, y0:y1, x0:x1] = template[:, y0 - top:y1 - top, x0 - left:x1 - left]
    return out


def _velocity(rng, max_shift: int) -> np.ndarray:
    return rng.integers(-max_shift, max_shift + 1, size=2)


def generate_sequence(cfg: SynthConfig | None = None, seed: int = 0) -> FrameSequence:
    cfg = cfg or SynthConfig()
    rng = make_rng(seed, "synth")
    h, w, n = cfg.height, cfg.width, cfg.frames
    ms = cfg.max_shift

    margin = n * ms + 1
    bg_pal = _palette(rng)
    canvas = _texture(rng, h + 2 * margin, w + 2 * margin, bg_pal, cfg.texture_sigma)
    v_bg = _velocity(rng, ms)  # (dy, dx) on screen per frame

    n_sprites = int(rng.integers(cfg.min_sprites, cfg.max_sprites + 1))
    sprites = []
    for _ in range(n_sprites):
        feather = float(rng.uniform(*cfg.feather))
        size = int(rng.integers(int(0.5 * min(h, w)), int(0.8 * min(h, w)) + 1))
        alpha_t = _sprite_alpha(rng, size, feather)[None]
        own = _palette(rng)
        mix = cfg.camouflage
        pal = ((1 - mix) * own[0] + mix * bg_pal[0], (1 - mix) * own[1] + mix * bg_pal[1])
        tex = _texture(rng, size, size, pal, cfg.texture_sigma)
        cue_tex = _texture(rng, size, size, CUE_PALETTE, cfg.texture_sigma) if cfg.cue_frames > 0 else tex
        vel = _velocity(rng, ms)
        if cfg.occlusion:
            while np.array_equal(vel, v_bg):
                vel = _velocity(rng, ms)
        # keep the sprite centre inside the frame at every time step
        lo = -(size // 4)
        hi = np.array([h, w]) - 3 * size // 4
        first = lo - np.minimum(vel, 0) * (n - 1)
        last = np.maximum(hi - np.maximum(vel, 0) * (n - 1), first)
        start = np.array([rng.integers(first[i], last[i] + 1) for i in range(2)])
        sprites.append(dict(alpha=alpha_t, tex=tex, cue_tex=cue_tex, vel=vel, start=start, feather=feather, size=size))

    seq = FrameSequence([], [], [], [], [], [], meta={
        "seed": seed,
        "bg_velocity": f"{int(v_bg[0])},{int(v_bg[1])}",
        "sprites": n_sprites,
        "sprite_velocities": ";".join(f"{int(s['vel'][0])},{int(s['vel'][1])}" for s in sprites),
        "feather": ";".join(f"{s['feather']:.3f}" for s in sprites),
    })
    labels = []
    for t in range(n):
        oy = margin - v_bg[0] * t
        ox = margin - v_bg[1] * t
        bg = canvas[:, oy:oy + h, ox:ox + w].copy()
        # front-to-back accumulation: sprite 0 is in front
        a_acc = np.zeros((1, h, w))
        premult = np.zeros((3, h, w))
        vis = []
        for spr in sprites:
            top, left = spr["start"] + spr["vel"] * t
            a_k = _place(spr["alpha"], int(top), int(left), h, w)
            tex = spr["cue_tex"] if t < cfg.cue_frames else spr["tex"]
            f_k = _place(tex, int(top), int(left), h, w)
            weight = (1.0 - a_acc) * a_k
            premult += weight * f_k
            a_acc = a_acc + weight
            vis.append(weight[0])
        alpha = np.clip(a_acc, 0.0, 1.0)
        fg = np.where(alpha > 0, premult / np.where(alpha > 0, alpha, 1.0), 0.0)
        fg = np.clip(fg, 0.0, 1.0)
        frame = composite(fg, bg, alpha)

        # layer id per pixel: 0 background, k+1 sprite k
        label = np.zeros((h, w), dtype=np.int64)
        if vis:
            best = np.argmax(np.stack(vis), axis=0)
            label = np.where(alpha[0] > 0.5, best + 1, 0)
        vel_by_label = np.stack([v_bg] + [s["vel"] for s in sprites]).astype(np.float64)
        flow = np.zeros((2, h, w))
        if t > 0:
            v = vel_by_label[label]  # (h, w, 2) as (dy, dx)
            flow[0] = -v[..., 1]
            flow[1] = -v[..., 0]
        seq.frames.append(frame)
        seq.alpha.append(alpha)
        seq.fg.append(fg)
        seq.bg.append(bg)
        seq.flow.append(flow)
        labels.append(label)

    mixed = [(a[0] > 0) & (a[0] < 1) for a in seq.alpha]
    for t in range(n):
        seq.occlusion.append(_occlusion(labels, mixed, seq.flow, t))
    return seq


def _occlusion(labels: list[np.ndarray], mixed: list[np.ndarray], flows: list[np.ndarray],
               t: int) -> np.ndarray:
    """Pixels whose flow source is a different layer, off-screen, on a layer edge,
    or inside a feather band (where two motions blend in one colour)."""
    label = labels[t]
    h, w = label.shape
    if t == 0:
        return np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    sx = xx + flows[t][0].astype(np.int64)
    sy = yy + flows[t][1].astype(np.int64)
    outside = (sx < 0) | (sx >= w) | (sy < 0) | (sy >= h)
    src = labels[t - 1][np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
    src_mixed = mixed[t - 1][np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]
    occ = outside | (src != label) | mixed[t] | src_mixed
    edges = np.zeros_like(occ)
    for lab in (label, labels[t - 1]):
        edges |= ndimage.morphological_gradient(lab, size=3) > 0
    return ndimage.binary_dilation(occ, iterations=1) | edges
