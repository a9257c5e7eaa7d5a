"""PNG raster IO and resampling helpers.

Images are 8-bit PNGs on disk (grayscale or RGB), floats in [0, 1] in
memory with shape (H, W, C). Masks are single-channel PNGs whose pixel
value is the class index. All functions are deterministic; writing the
same array twice produces byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "load_png",
    "save_png",
    "png_size",
    "to_float",
    "to_uint8",
    "bilinear_resize",
    "upsample_nearest",
    "heat_colormap",
]


def load_png(path: str | Path) -> np.ndarray:
    """Read a PNG into a uint8 array: (H, W) for grayscale, (H, W, 3) for RGB."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P") else "L")
        return np.asarray(im, dtype=np.uint8)


def save_png(arr: np.ndarray, path: str | Path) -> None:
    """Write a uint8 array as PNG; (H, W) or (H, W, 1) grayscale, (H, W, 3) RGB."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"save_png expects uint8, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(str(path), format="PNG")


def png_size(path: str | Path) -> tuple[int, int]:
    """(height, width) from the PNG header without decoding pixel data."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 image -> float64 in [0, 1] with an explicit channel axis."""
    out = np.asarray(img, dtype=np.float64) / 255.0
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float image in [0, 1] -> uint8, rounding half away from zero via +0.5 floor."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment and edge clamping.

    For integer upscales this scheme conserves total mass exactly:
    sum(output) == sum(input) * scale_h * scale_w (up to float rounding),
    which the explain module's conservation invariant relies on.
    Accepts (H, W) or (H, W, C) float arrays.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    top = (1.0 - wx) * img[np.ix_(y0c, x0c)] + wx * img[np.ix_(y0c, x1c)]
    bot = (1.0 - wx) * img[np.ix_(y1c, x0c)] + wx * img[np.ix_(y1c, x1c)]
    out = (1.0 - wy) * top + wy * bot
    return out[:, :, 0] if squeeze else out


def upsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-replicate each pixel ``factor`` times along both spatial axes."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def heat_colormap(v: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB floats: black -> red -> yellow -> white.

    Piecewise linear: red ramps on [0, 1/3], green on [1/3, 2/3], blue on
    [2/3, 1]. This fixed map is the documented overlay colormap.
    """
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)
