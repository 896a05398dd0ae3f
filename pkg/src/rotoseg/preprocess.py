"""Resampling to a target spacing and whole-volume z-score normalization."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .io import Volume


def _axis_sources(n_in: int, old: float, new: float):
    n_out = max(1, int(np.floor(n_in * old / new + 0.5)))
    # voxel centers aligned: output center j sits at physical (j + 0.5) * new
    src = (np.arange(n_out) + 0.5) * (new / old) - 0.5
    return n_out, np.clip(src, 0.0, n_in - 1)


def _linear_along(arr: np.ndarray, axis: int, src: np.ndarray) -> np.ndarray:
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, arr.shape[axis] - 1)
    frac = (src - lo).astype(np.float64)
    shape = [1] * arr.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + frac * (b - a)


def resample(vol: Volume, target_spacing, labels: bool = False) -> Volume:
    """Resample to ``target_spacing`` (z, y, x mm).

    Images use separable trilinear interpolation; label maps use nearest
    neighbour. Output extent per axis is round(extent * old / new), at least 1.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ShapeError(f"target spacing must be three positive values, got {target_spacing}")
    arr = vol.array
    offset = arr.ndim - 3
    out = arr if labels else arr.astype(np.float64)
    for axis, (old, new) in enumerate(zip(vol.spacing, target)):
        if old == new:
            continue
        ax = axis + offset
        _, src = _axis_sources(arr.shape[ax], old, new)
        if labels:
            out = np.take(out, np.floor(src + 0.5).astype(np.intp), axis=ax)
        else:
            out = _linear_along(out, ax, src)
    out = out.astype(arr.dtype, copy=False) if labels else out.astype(np.float32)
    return Volume(out, target)


def normalize_zscore(vol: Volume) -> Volume:
    """(v - mean) / std over all voxels; a constant volume maps to zeros."""
    if vol.array.size < 2:
        raise ShapeError("z-score normalization needs at least two voxels")
    arr = vol.array.astype(np.float64)
    mean = arr.mean()
    std = arr.std()
    if std == 0 or np.all(arr == arr.flat[0]):
        return Volume(np.zeros(arr.shape, dtype=np.float32), vol.spacing)
    return Volume(((arr - mean) / std).astype(np.float32), vol.spacing)
