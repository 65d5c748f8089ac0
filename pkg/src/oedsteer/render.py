"""Field files to binary PPM (P6) images.

Values map linearly from the fluid minimum (black) to the fluid maximum
(white); a constant field renders mid-gray. Obstacle cells are magenta.
North is up, so the last grid row is the first image row.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .fileio import read_field_array

MASK_RGB = (255, 0, 255)


def field_to_rgb(arr: np.ndarray, scale: int = 1) -> np.ndarray:
    """``(ny, nx)`` array with nan for solid cells to an ``(H, W, 3)`` uint8 image."""
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    solid = np.isnan(arr)
    fluid = arr[~solid]
    gray = np.full(arr.shape, 128, dtype=np.uint8)
    if fluid.size:
        lo, hi = float(fluid.min()), float(fluid.max())
        if hi > lo:
            gray = np.rint(255.0 * (np.where(solid, lo, arr) - lo) / (hi - lo)).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    rgb[solid] = MASK_RGB
    rgb = rgb[::-1]
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    return np.ascontiguousarray(rgb)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()


def render_field(field_file, out_image, scale: int = 1) -> Path:
    """Render a field file as a P6 pixmap; output bytes depend only on the input."""
    _, arr = read_field_array(field_file)
    out = Path(out_image)
    out.write_bytes(encode_ppm(field_to_rgb(arr, scale)))
    return out


def read_ppm(path) -> np.ndarray:
    """Decode a P6 file written by :func:`encode_ppm`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 pixmap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
