"""Binary PGM (P5) / PPM (P6) reading and writing, plus patchification."""

from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s")


def read_pnm(data: bytes) -> np.ndarray:
    """Decode to floats in [0, 1]; grayscale ``(H, W)`` or colour ``(H, W, 3)``."""
    m = _HEADER.match(data)
    if not m:
        raise ValueError("not a binary PGM (P5) or PPM (P6) file")
    magic, width, height, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = data[m.end():]
    if len(payload) < count * dtype.itemsize:
        raise ValueError("truncated image payload")
    pixels = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float64) / maxval
    return pixels.reshape(height, width) if channels == 1 else pixels.reshape(height, width, 3)


def write_pgm(image: np.ndarray) -> bytes:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim != 2:
        raise ValueError("write_pgm expects a 2-D grayscale image")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.round(image * 255).astype(np.uint8).tobytes()


def write_ppm(image: np.ndarray) -> bytes:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects an (H, W, 3) image")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.round(image * 255).astype(np.uint8).tobytes()


def to_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Split a grayscale image (colour is averaged) into ``(H/p, W/p, p*p)`` patch vectors."""
    if image.ndim == 3:
        image = image.mean(axis=2)
    h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {w}x{h} is not divisible by patch size {patch}")
    grid = image.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    return grid.reshape(h // patch, w // patch, patch * patch)


def from_patches(patches: np.ndarray) -> np.ndarray:
    gh, gw, dim = patches.shape
    p = int(round(dim ** 0.5))
    return patches.reshape(gh, gw, p, p).transpose(0, 2, 1, 3).reshape(gh * p, gw * p)
