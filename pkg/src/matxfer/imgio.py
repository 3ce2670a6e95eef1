"""Image and buffer IO: sRGB conversion, 8-bit PNG, and float PFM maps.

Stored PNGs are tone-mapped (clamp to [0,1], sRGB gamma); all losses and
metrics operate in linear space after decoding.  G-buffers are kept
lossless as little-endian PFM.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .ad import ConfigError


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> sRGB [0,1] (IEC 61966-2-1)."""
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB [0,1] -> linear [0,1]."""
    s = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def write_png(path, img: np.ndarray) -> None:
    """Write a float [0,1] HxW or HxWx3 array as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = (np.round(arr * 255.0)).astype(np.uint8)
    Image.fromarray(q).save(str(path))


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG back to float [0,1] (shape as stored)."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0


def write_pfm(path, data: np.ndarray) -> None:
    """Write HxW or HxWx3 float data as little-endian PFM.

    Follows the PFM convention of bottom-to-top scanline order and a
    negative scale marking little-endian floats.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ConfigError(f"PFM needs HxW or HxWx3 data, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(str(path), "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file written by `write_pfm` (or any spec-conforming one)."""
    with open(str(path), "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ConfigError(f"not a PFM file: magic {magic!r} in {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if magic == b"PF" else 1)
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ConfigError(f"truncated PFM payload in {path}")
        dtype = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return arr.reshape(shape)[::-1].copy()


MASK_THRESHOLD = 0.5


def write_mask(path, mask: np.ndarray) -> None:
    """Write a boolean/float coverage mask as an 8-bit grayscale PNG."""
    m = np.asarray(mask, dtype=np.float64)
    write_png(path, m)


def read_mask(path) -> np.ndarray:
    """Read a mask PNG, binarized at 0.5."""
    return read_png(path) >= MASK_THRESHOLD
