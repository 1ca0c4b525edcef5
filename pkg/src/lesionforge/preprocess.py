"""CT intensity windowing and 2.5D input construction.

The synthetic detector never looks at pixels; these functions define the
contract a real detector adapter consumes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lesionforge import _kernels

TARGET_SIZE = (512, 512)


@dataclass(frozen=True)
class WindowSpec:
    """HU display window given as ``[lower, upper]`` bounds."""

    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError(f"window lower {self.lower} must be < upper {self.upper}")

    @classmethod
    def from_center_width(cls, center: float, width: float) -> "WindowSpec":
        return cls(center - width / 2.0, center + width / 2.0)

    @classmethod
    def parse(cls, pair, mode: str = "bounds") -> "WindowSpec":
        """Read a two-number window either as bounds or as (center, width)."""
        a, b = (float(v) for v in pair)
        if mode == "bounds":
            return cls(a, b)
        if mode == "center_width":
            return cls.from_center_width(a, b)
        raise ValueError(f"window mode must be 'bounds' or 'center_width', got {mode!r}")


SOFT_TISSUE = WindowSpec(-175.0, 275.0)


def hu_window(values, w: WindowSpec = SOFT_TISSUE) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = (v - w.lower) / (w.upper - w.lower) * 255.0
    return np.clip(out, 0.0, 255.0)


def hu_unwindow(values, w: WindowSpec = SOFT_TISSUE) -> np.ndarray:
    """Inverse of :func:`hu_window` on [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    return v / 255.0 * (w.upper - w.lower) + w.lower


@dataclass(frozen=True)
class Slab25D:
    planes: np.ndarray  # (3, H, W) float64 in [0, 255]
    center_slice_index: int

    def __post_init__(self) -> None:
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) planes, got {self.planes.shape}")
        if self.planes.size and (self.planes.min() < 0.0 or self.planes.max() > 255.0):
            raise ValueError("plane values outside [0, 255]")

    @property
    def source_slices(self) -> tuple[int, int, int]:
        return self.neighbors(self.center_slice_index, None)

    @staticmethod
    def neighbors(center: int, depth: int | None) -> tuple[int, int, int]:
        lo = max(center - 1, 0)
        hi = center + 1 if depth is None else min(center + 1, depth - 1)
        return (lo, center, hi)


def build_25d(volume, center: int, w: WindowSpec = SOFT_TISSUE) -> Slab25D:
    """Stack the windowed slices ``center-1, center, center+1``.

    Missing neighbors at either end of the volume repeat the edge slice.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"volume must be (depth, H, W), got shape {vol.shape}")
    depth = vol.shape[0]
    if not 0 <= center < depth:
        raise IndexError(f"center slice {center} outside [0, {depth})")
    idx = Slab25D.neighbors(center, depth)
    return Slab25D(hu_window(vol[list(idx)], w), center)


def resize_bilinear(plane, target: tuple[int, int] = TARGET_SIZE) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError(f"expected a non-empty 2D plane, got shape {plane.shape}")
    h, w = target
    if plane.shape == (h, w):
        return plane.copy()
    out = _kernels.resize(plane, h, w)
    # convex weights can overshoot by an ulp
    return np.clip(out, plane.min(), plane.max())


def read_raw_volume(raw_path: str | os.PathLike, header_path: str | os.PathLike | None = None) -> np.ndarray:
    """Load little-endian int16 HU voxels described by a ``width,height,depth`` CSV.

    The header defaults to ``<raw_path>.csv``.  Returns ``(depth, height, width)``.
    """
    raw_path = Path(raw_path)
    header_path = Path(header_path) if header_path else raw_path.with_suffix(raw_path.suffix + ".csv")
    with open(header_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise ValueError(f"{header_path}: expected exactly one data row")
    try:
        width, height, depth = (int(rows[0][k]) for k in ("width", "height", "depth"))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{header_path}: bad header ({exc})") from None
    data = np.fromfile(raw_path, dtype="<i2")
    if data.size != width * height * depth:
        raise ValueError(
            f"{raw_path}: {data.size} voxels, header says {width}x{height}x{depth}"
        )
    return data.reshape(depth, height, width)


def write_raw_volume(volume, raw_path: str | os.PathLike) -> Path:
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError("volume must be (depth, H, W)")
    raw_path = Path(raw_path)
    vol.astype("<i2").tofile(raw_path)
    header = raw_path.with_suffix(raw_path.suffix + ".csv")
    with open(header, "w", newline="", encoding="utf-8") as fh:
        fh.write("width,height,depth\n")
        fh.write(f"{vol.shape[2]},{vol.shape[1]},{vol.shape[0]}\n")
    return header
