"""Figure-style PNG slice rendering.

Renders one axial / coronal / sagittal slice of a scalar volume as an 8-bit
grayscale image, optionally alpha-blending colored probability-map overlays
on top.  Pixels are a pure function of the inputs, so renders of the same
volume are byte-identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .volume import ScalarVolume

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


@dataclass(frozen=True)
class Overlay:
    """A scalar map blended over the grayscale base.

    values in [0, 1] act as per-voxel blend weight (scaled by alpha);
    color is an RGB triple in [0, 255].
    """

    volume: ScalarVolume
    color: tuple = (255, 64, 64)
    alpha: float = 0.5
    threshold: float = 0.0  # weights at or below this are not drawn

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def _slice_index(n: int, position: float | int) -> int:
    """Integer index from an absolute index or a [0, 1] fraction."""
    if isinstance(position, (int, np.integer)):
        k = int(position)
    else:
        k = int(round(float(position) * (n - 1)))
    if not 0 <= k < n:
        raise ValueError(f"slice index {k} outside [0, {n})")
    return k


def _extract(values: np.ndarray, axis: int, k: int) -> np.ndarray:
    sl = np.take(values, k, axis=axis)
    # Image rows run along the remaining later axis, flipped so that
    # increasing third coordinate (usually superior) points up.
    return sl.T[::-1]


def window_to_uint8(img: np.ndarray, window: tuple | None = None) -> np.ndarray:
    """Linear intensity window to 8 bits; default spans the slice range."""
    img = np.asarray(img, dtype=np.float64)
    if window is None:
        lo, hi = float(img.min()), float(img.max())
    else:
        lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    t = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.round(t * 255.0).astype(np.uint8)


def render_slice(
    volume: ScalarVolume,
    overlays: tuple | list = (),
    plane: str = "axial",
    position: float | int = 0.5,
    window: tuple | None = None,
) -> np.ndarray:
    """Render one slice to an (H, W, 3) uint8 RGB array."""
    if plane not in AXES:
        raise ValueError(f"plane must be one of {sorted(AXES)}")
    axis = AXES[plane]
    k = _slice_index(volume.grid.dims[axis], position)
    base = window_to_uint8(_extract(volume.values, axis, k), window)
    rgb = np.repeat(base[..., None], 3, axis=2).astype(np.float64)
    for ov in overlays:
        if ov.volume.grid.dims != volume.grid.dims:
            raise ValueError("overlay grid does not match the base volume")
        w = np.clip(_extract(np.asarray(ov.volume.values, dtype=np.float64), axis, k), 0.0, 1.0)
        w = np.where(w > ov.threshold, w * ov.alpha, 0.0)
        color = np.asarray(ov.color, dtype=np.float64)
        rgb = (1.0 - w[..., None]) * rgb + w[..., None] * color
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def save_png(pixels: np.ndarray, path) -> None:
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def render_to_png(
    volume: ScalarVolume,
    path,
    overlays: tuple | list = (),
    plane: str = "axial",
    position: float | int = 0.5,
    window: tuple | None = None,
) -> np.ndarray:
    pixels = render_slice(volume, overlays, plane, position, window)
    save_png(pixels, path)
    return pixels
