"""8-bit RGB PNG input/output; arrays are (3, H, W) floats in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(chw: np.ndarray) -> np.ndarray:
    chw = np.asarray(chw, dtype=np.float64)
    if chw.ndim == 2:
        chw = np.broadcast_to(chw, (3,) + chw.shape)
    return np.clip(np.round(chw.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, chw: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(to_uint8(chw), mode="RGB").save(path)
    return path


def load_png(path, size: int | None = None) -> np.ndarray:
    """Read any Pillow-readable image as RGB; optionally resize to ``size`` x ``size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def colorize(values: np.ndarray) -> np.ndarray:
    """Grey-scale (3, H, W) rendering of a 2-D map, min-max normalized."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return np.broadcast_to(v, (3,) + v.shape).copy()


def draw_points(chw: np.ndarray, points: np.ndarray, color=(1.0, 1.0, 0.0), radius: int = 1) -> np.ndarray:
    """Mark normalized [-1, 1] points on a copy of the image with small squares."""
    img = np.array(chw, dtype=np.float64)
    _, h, w = img.shape
    for x, y in np.asarray(points):
        u = int(round((x + 1) / 2 * (w - 1)))
        v = int(round((y + 1) / 2 * (h - 1)))
        img[:, max(v - radius, 0) : v + radius + 1, max(u - radius, 0) : u + radius + 1] = np.asarray(color)[:, None, None]
    return img
