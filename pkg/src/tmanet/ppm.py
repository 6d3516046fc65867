"""Binary PPM (P6) images: 8-bit RGB, no codec dependencies."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError


def to_bytes(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1], shape (3, H, W) or (H, W, 3), to uint8 (H, W, 3)."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 3 and rgb.shape[0] == 3 and rgb.shape[-1] != 3:
        rgb = np.transpose(rgb, (1, 2, 0))
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ShapeError(f"expected an RGB image, got shape {rgb.shape}")
    if rgb.dtype == np.uint8:
        return rgb
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> Path:
    img = to_bytes(rgb)
    H, W = img.shape[:2]
    path = Path(path)
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` (no comments, maxval 255)."""
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit P6 image")
    W, H = int(parts[1]), int(parts[2])
    data = buf[len(buf) - 3 * H * W :]
    if len(data) != 3 * H * W:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3)
