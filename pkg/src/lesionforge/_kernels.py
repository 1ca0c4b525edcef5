"""Numeric inner loops with a compiled and a pure-numpy implementation.

Each public kernel exists twice: ``<name>_numpy`` (broadcasting) and
``<name>_numba`` (explicit loops under ``@njit``, ``None`` when numba is off).
The unsuffixed name is the one the rest of the package calls.

Box arrays are float64 with columns ``x1, y1, x2, y2`` (2D) or
``x1, y1, x2, y2, z1, z2`` (3D, inclusive integer-valued slice bounds).
``mode`` 0 is IoU, 1 is IoBB with the row argument as the predicted box.
"""

from __future__ import annotations

import numpy as np

from lesionforge._accel import HAS_NUMBA, njit

IOU = 0
IOBB = 1


def _as_boxes(a, width: int) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected an (N, {width}) box array, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# pairwise 2D overlap
# --------------------------------------------------------------------------


def overlap_2d_numpy(a: np.ndarray, b: np.ndarray, mode: int) -> np.ndarray:
    ax1, ay1, ax2, ay2 = (a[:, i : i + 1] for i in range(4))
    bx1, by1, bx2, by2 = (b[None, :, i] for i in range(4))
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    if mode == IOBB:
        denom = np.broadcast_to(area_a, inter.shape)
    else:
        area_b = (bx2 - bx1) * (by2 - by1)
        denom = area_a + area_b - inter
    out = np.zeros(inter.shape)
    np.divide(inter, denom, out=out, where=denom > 0.0)
    return out


def _overlap_2d_loops(a, b, mode):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = max(0.0, min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0]))
            ih = max(0.0, min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1]))
            inter = iw * ih
            if mode == 1:
                denom = area_a
            else:
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                denom = area_a + area_b - inter
            if denom > 0.0:
                out[i, j] = inter / denom
    return out


overlap_2d_numba = njit(_overlap_2d_loops)


def overlap_2d(a, b, mode: int = IOU) -> np.ndarray:
    """Pairwise IoU / IoBB matrix of shape (len(a), len(b))."""
    a = _as_boxes(a, 4)
    b = _as_boxes(b, 4)
    if HAS_NUMBA:
        return overlap_2d_numba(a, b, mode)
    return overlap_2d_numpy(a, b, mode)


# --------------------------------------------------------------------------
# pairwise 3D overlap
# --------------------------------------------------------------------------


def overlap_3d_numpy(a: np.ndarray, b: np.ndarray, mode: int) -> np.ndarray:
    ax1, ay1, ax2, ay2, az1, az2 = (a[:, i : i + 1] for i in range(6))
    bx1, by1, bx2, by2, bz1, bz2 = (b[None, :, i] for i in range(6))
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    idz = np.maximum(0.0, np.minimum(az2, bz2) - np.maximum(az1, bz1) + 1.0)
    inter = iw * ih * idz
    vol_a = (ax2 - ax1) * (ay2 - ay1) * (az2 - az1 + 1.0)
    if mode == IOBB:
        denom = np.broadcast_to(vol_a, inter.shape)
    else:
        vol_b = (bx2 - bx1) * (by2 - by1) * (bz2 - bz1 + 1.0)
        denom = vol_a + vol_b - inter
    out = np.zeros(inter.shape)
    np.divide(inter, denom, out=out, where=denom > 0.0)
    return out


def _overlap_3d_loops(a, b, mode):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        vol_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1]) * (a[i, 5] - a[i, 4] + 1.0)
        for j in range(m):
            iw = max(0.0, min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0]))
            ih = max(0.0, min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1]))
            idz = max(0.0, min(a[i, 5], b[j, 5]) - max(a[i, 4], b[j, 4]) + 1.0)
            inter = iw * ih * idz
            if mode == 1:
                denom = vol_a
            else:
                vol_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) * (b[j, 5] - b[j, 4] + 1.0)
                denom = vol_a + vol_b - inter
            if denom > 0.0:
                out[i, j] = inter / denom
    return out


overlap_3d_numba = njit(_overlap_3d_loops)


def overlap_3d(a, b, mode: int = IOU) -> np.ndarray:
    """Pairwise 3D IoU / IoBB matrix; z thickness counts inclusive slices."""
    a = _as_boxes(a, 6)
    b = _as_boxes(b, 6)
    if HAS_NUMBA:
        return overlap_3d_numba(a, b, mode)
    return overlap_3d_numpy(a, b, mode)


# --------------------------------------------------------------------------
# bilinear resize, half-pixel centred sampling with edge clamping
# --------------------------------------------------------------------------


def _sample_coords(n_in: int, n_out: int):
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_numpy(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    y0, y1, fy = _sample_coords(plane.shape[0], out_h)
    x0, x1, fx = _sample_coords(plane.shape[1], out_w)
    top = plane[y0][:, x0] * (1.0 - fx) + plane[y0][:, x1] * fx
    bot = plane[y1][:, x0] * (1.0 - fx) + plane[y1][:, x1] * fx
    return top * (1.0 - fy[:, None]) + bot * fy[:, None]


def _resize_loops(plane, y0, y1, fy, x0, x1, fx):
    out_h = y0.shape[0]
    out_w = x0.shape[0]
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        wy = fy[i]
        for j in range(out_w):
            wx = fx[j]
            top = plane[y0[i], x0[j]] * (1.0 - wx) + plane[y0[i], x1[j]] * wx
            bot = plane[y1[i], x0[j]] * (1.0 - wx) + plane[y1[i], x1[j]] * wx
            out[i, j] = top * (1.0 - wy) + bot * wy
    return out


_resize_numba_inner = njit(_resize_loops)


def resize_numba(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if _resize_numba_inner is None:
        raise RuntimeError("numba backend is disabled")
    y0, y1, fy = _sample_coords(plane.shape[0], out_h)
    x0, x1, fx = _sample_coords(plane.shape[1], out_w)
    return _resize_numba_inner(plane, y0, y1, fy, x0, x1, fx)


def resize(plane, out_h: int, out_w: int) -> np.ndarray:
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    if HAS_NUMBA:
        return resize_numba(plane, out_h, out_w)
    return resize_numpy(plane, out_h, out_w)
