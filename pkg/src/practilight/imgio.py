"""Image file helpers: 8-bit PNG for display images, 16-bit PNG / raw float for passes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_png8(path, img: np.ndarray):
    """img: HxW or HxWx3 float in [0,1]."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    """Returns float in [0,1], HxW or HxWx3. 16-bit PNGs are scaled by 65535."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def save_png16(path, img: np.ndarray):
    """Single channel only; values clipped to [0,1] and quantized to 16 bits."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def save_raw(path, img: np.ndarray):
    """Lossless float32 .npy for linear radiometric passes."""
    np.save(str(path), np.asarray(img, dtype=np.float32))


def load_raw(path) -> np.ndarray:
    return np.load(str(path)).astype(np.float64)


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return 0.2126 * img[..., 0] + 0.7152 * img[..., 1] + 0.0722 * img[..., 2]


def resize(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize via PIL; preserves channel count."""
    h, w = hw
    if img.shape[:2] == (h, w):
        return img
    mode_arr = np.asarray(img, dtype=np.float32)
    out = Image.fromarray(mode_arr, mode="F") if img.ndim == 2 else None
    if out is not None:
        return np.asarray(out.resize((w, h), Image.BILINEAR), dtype=np.float64)
    chans = [
        np.asarray(
            Image.fromarray(mode_arr[..., c], mode="F").resize((w, h), Image.BILINEAR),
            dtype=np.float64,
        )
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=-1)
