"""Binary PPM (P6, 8-bit) images as float arrays in [0, 1], shape (3, H, W)."""

from __future__ import annotations

import re

import numpy as np

from .errors import ShapeError

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class PpmError(ValueError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 0..255."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    pixels = quantize(img).transpose(1, 2, 0)  # interleaved RGB
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    m = _HEADER.match(buf)
    if not m:
        raise PpmError("not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PpmError(f"only 8-bit PPM is supported, maxval={maxval}")
    if w < 1 or h < 1:
        raise PpmError(f"bad image size {w}x{h}")
    body = buf[m.end():]
    if len(body) != 3 * w * h:
        raise PpmError(f"pixel payload is {len(body)} bytes, expected {3 * w * h}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
