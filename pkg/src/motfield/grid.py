"""Dense multi-channel grids and float/byte image file IO.

A :class:`Grid` is the universal container of this library: images are
H x W x 3, depth maps H x W x 1, motion fields H x W x 3, masks H x W x 1.
Data is stored row-major as float64 and must stay finite.

File formats:
  * PFM (portable float map, little-endian, scale -1.0) for float grids,
  * PPM (binary P6) for 8-bit image export,
  * PGM (binary P5) for 8-bit masks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    pass


def as_array(x, channels=None):
    """Coerce a Grid or ndarray to an (H, W, C) float64 array."""
    a = x.data if isinstance(x, Grid) else np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise GridError(f"expected 2D or 3D array, got shape {a.shape}")
    if channels is not None and a.shape[2] != channels:
        raise GridError(f"expected {channels} channels, got {a.shape[2]}")
    return a


@dataclass(frozen=True)
class Grid:
    """Immutable H x W x C real-valued field."""

    data: np.ndarray = field()

    def __post_init__(self):
        a = as_array(self.data)
        if not np.all(np.isfinite(a)):
            raise GridError("grid contains non-finite values")
        a = np.ascontiguousarray(a, dtype=np.float64)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None):
        return np.asarray(self.data, dtype=dtype)


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, grid):
    """Write a 1- or 3-channel grid as little-endian PFM (scale -1.0)."""
    a = as_array(grid)
    h, w, c = a.shape
    if c not in (1, 3):
        raise GridError(f"PFM supports 1 or 3 channels, got {c}")
    header = ("PF" if c == 3 else "Pf") + f"\n{w} {h}\n-1.0\n"
    data = a.astype("<f4")
    # PFM scanlines run bottom-to-top
    payload = data[::-1].tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def read_pfm(path):
    """Read a PFM file into a Grid (float64, exact float32 values)."""
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise GridError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    c = 3 if color else 1
    offset = m.end()
    count = h * w * c
    dt = "<f4" if scale < 0 else ">f4"
    if len(raw) - offset < count * 4:
        raise GridError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    a = data.reshape(h, w, c)[::-1].astype(np.float64)
    return Grid(a)


# ---------------------------------------------------------------------------
# PPM / PGM


def _to_u8(a):
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, grid):
    """Write a 3-channel grid (values in [0, 1]) as binary P6."""
    a = as_array(grid, channels=3)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(_to_u8(a).tobytes())


def write_pgm(path, grid):
    """Write a 1-channel grid (values in [0, 1]) as binary P5."""
    a = as_array(grid, channels=1)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_to_u8(a[:, :, 0]).tobytes())


def _read_pnm(path, magic, channels):
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(magic + rb"\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise GridError(f"{path}: unsupported PNM header")
    w, h = int(m.group(1)), int(m.group(2))
    count = h * w * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=m.end())
    shape = (h, w, channels)
    return Grid(data.reshape(shape).astype(np.float64) / 255.0)


def read_ppm(path):
    return _read_pnm(path, rb"P6", 3)


def read_pgm(path):
    return _read_pnm(path, rb"P5", 1)
