"""Trimap generation by dilating the transition region of an alpha matte."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ShapeError, UsageError

BACKGROUND, UNKNOWN, FOREGROUND = 0, 128, 255


@dataclass
class Trimap:
    map: np.ndarray  # (H, W) uint8 with labels 0 / 128 / 255

    @property
    def unknown(self) -> np.ndarray:
        return self.map == UNKNOWN

    @property
    def foreground(self) -> np.ndarray:
        return self.map == FOREGROUND

    @property
    def background(self) -> np.ndarray:
        return self.map == BACKGROUND


def _as_2d(alpha) -> np.ndarray:
    a = np.asarray(getattr(alpha, "data", alpha), dtype=np.float64)
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise ShapeError(f"expected a single-channel alpha, got {a.shape}")
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D alpha, got {a.shape}")
    return a


def dilate_trimap(alpha, radius: int) -> Trimap:
    """Unknown band: the transition pixels plus the inner edge of ``alpha >= 0.5``,
    dilated by a (2r+1) square. Foreground is ``alpha == 1`` outside the band."""
    if radius < 1:
        raise UsageError("radius must be >= 1")
    a = _as_2d(alpha)
    solid = a >= 0.5
    # border_value=1 so the image border does not count as an edge
    edge = solid & ~ndimage.binary_erosion(solid, border_value=1)
    seed = ((a > 0) & (a < 1)) | edge
    band = ndimage.binary_dilation(seed, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))
    out = np.full(a.shape, BACKGROUND, dtype=np.uint8)
    out[(a == 1) & ~band] = FOREGROUND
    out[band] = UNKNOWN
    return Trimap(out)
