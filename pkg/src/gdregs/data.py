"""Image datasets: the IDX container and a built-in synthetic stroke generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE_3D = 0x00000803
_HEADER = struct.Struct(">IIII")
MAX_IDX_BYTES = 1 << 34


class IdxError(ValueError):
    pass


@dataclass
class DatasetHandle:
    """``images`` is N x D with intensities in [0, 1], rows flattened row-major.

    ``split`` is the number of leading columns forming the top half, used as
    context for the conditional task.
    """

    images: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2 or self.images.shape[1] != self.rows * self.cols:
            raise ValueError(f"images must be N x {self.rows * self.cols}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def split(self) -> int:
        return (self.rows // 2) * self.cols

    def top(self) -> np.ndarray:
        return self.images[:, :self.split]

    def bottom(self) -> np.ndarray:
        return self.images[:, self.split:]


def load_idx(path) -> DatasetHandle:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IdxError(f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, n, rows, cols = _HEADER.unpack_from(raw)
    if magic != IDX_UBYTE_3D:
        raise IdxError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_UBYTE_3D:08x}")
    expected = n * rows * cols
    if expected > MAX_IDX_BYTES:
        raise IdxError(f"{path}: dimensions {n}x{rows}x{cols} overflow the size limit")
    actual = len(raw) - _HEADER.size
    if actual < expected:
        raise IdxError(f"{path}: truncated payload, expected {expected} bytes, got {actual}")
    if actual > expected:
        raise IdxError(f"{path}: {actual - expected} trailing bytes after {expected} payload bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size, count=expected)
    return DatasetHandle(pixels.reshape(n, rows * cols) / 255.0, rows, cols)


def save_idx(path, images, rows: int, cols: int):
    """Write intensities in [0, 1] (or raw uint8) as an unsigned-byte IDX file."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    images = images.reshape(images.shape[0], rows * cols)
    Path(path).write_bytes(_HEADER.pack(IDX_UBYTE_3D, images.shape[0], rows, cols) + images.tobytes())


def synthetic_strokes(n: int, rng: np.random.Generator, rows: int = 28, cols: int = 28,
                      max_strokes: int = 3, width: float = 1.2) -> DatasetHandle:
    """Anti-aliased line strokes spanning the image, so the top half predicts the bottom.

    Each image gets 1 to ``max_strokes`` segments between random border-ish
    points; intensity falls off as a Gaussian in distance to the segment.
    """
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1)
    out = np.zeros((n, rows * cols))
    margin = 3.0
    for i in range(n):
        img = np.zeros(rows * cols)
        for _ in range(rng.integers(1, max_strokes + 1)):
            a = np.array([rng.uniform(margin, rows / 2), rng.uniform(margin, cols - margin)])
            b = np.array([rng.uniform(rows / 2, rows - margin), rng.uniform(margin, cols - margin)])
            d = b - a
            t = np.clip(((pix - a) @ d) / (d @ d), 0, 1)
            dist2 = np.sum((pix - (a + t[:, None] * d)) ** 2, axis=1)
            img = np.maximum(img, np.exp(-dist2 / (2 * width ** 2)))
        out[i] = img
    return DatasetHandle(np.clip(out, 0.0, 1.0), rows, cols)
