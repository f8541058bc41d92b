"""8-bit image encoding: PNG (via Pillow) and binary PPM."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def to_uint8(img) -> np.ndarray:
    """``round(255 * clamp(x))`` with halves rounded up."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def quantize(img) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def _as_rgb8(img) -> np.ndarray:
    a = to_uint8(img)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return a


def write_png(path, img) -> None:
    # fixed compression settings keep the encoded bytes reproducible
    PILImage.fromarray(_as_rgb8(img)).save(path, format="PNG", compress_level=6, optimize=False)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return a.astype(np.float64) / 255.0


def write_ppm(path, img) -> None:
    a = _as_rgb8(img)
    h, w, _ = a.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + a.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    body = data[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM file")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0
