"""Sliding-window prediction with Gaussian or uniform logit blending."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SlidingWindowPlan:
    volume_extents: tuple[int, int, int]
    window: tuple[int, int, int]
    overlap: float
    origins: tuple[tuple[int, int, int], ...]
    blend: str = "gaussian"
    sigma_scale: float = 1.0 / 8.0


def _axis_origins(extent: int, window: int, overlap: float) -> list[int]:
    stride = max(1, math.ceil(window * (1.0 - overlap)))
    origins = list(range(0, extent - window + 1, stride))
    if origins[-1] != extent - window:
        origins.append(extent - window)
    return origins


def plan_windows(volume_extents, window_extents, overlap: float = 0.5, blend: str = "gaussian",
                 sigma_scale: float = 1.0 / 8.0) -> SlidingWindowPlan:
    vol = tuple(int(v) for v in volume_extents)
    win = tuple(int(w) for w in window_extents)
    if len(vol) != 3 or len(win) != 3:
        raise ShapeError("volume and window extents must be (D, H, W) triples")
    if any(w < 1 or w > v for w, v in zip(win, vol)):
        raise ShapeError(f"window {win} exceeds volume {vol}; pad the volume to at least the window size")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {overlap}")
    if blend not in ("gaussian", "uniform"):
        raise ConfigError(f"unknown blend mode {blend!r}")
    per_axis = [_axis_origins(v, w, overlap) for v, w in zip(vol, win)]
    origins = tuple(itertools.product(*per_axis))
    return SlidingWindowPlan(vol, win, float(overlap), origins, blend, sigma_scale)


def blend_weights(window, blend: str = "gaussian", sigma_scale: float = 1.0 / 8.0) -> np.ndarray:
    """Separable importance map, peak 1 at the window center, float64."""
    if blend == "uniform":
        return np.ones(tuple(window), dtype=np.float64)
    axes = []
    for w in window:
        center = (w - 1) / 2.0
        sigma = w * sigma_scale
        r = np.arange(w, dtype=np.float64) - center
        axes.append(np.exp(-0.5 * (r / sigma) ** 2))
    weights = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    weights /= weights.max()
    # keep the window rim strictly positive so edge voxels are never unweighted
    floor = weights[weights > 0].min()
    return np.maximum(weights, floor)


def sliding_window_predict(vol: np.ndarray, model: Callable[[np.ndarray], np.ndarray],
                           plan: SlidingWindowPlan) -> np.ndarray:
    """Blend per-window logits into a full-volume [C, D, H, W] float32 array.

    Accumulation runs in float64 over windows in plan order, then divides by
    the accumulated weight and casts back to float32.
    """
    vol = np.asarray(vol)
    if vol.ndim == 3:
        vol = vol[None]
    if tuple(vol.shape[1:]) != plan.volume_extents:
        raise ShapeError(f"volume {vol.shape[1:]} does not match plan extents {plan.volume_extents}")
    weights = blend_weights(plan.window, plan.blend, plan.sigma_scale)
    acc = None
    norm = np.zeros(plan.volume_extents, dtype=np.float64)
    wz, wy, wx = plan.window
    for z, y, x in plan.origins:
        sl = (slice(z, z + wz), slice(y, y + wy), slice(x, x + wx))
        logits = np.asarray(model(vol[(slice(None),) + sl]))
        if logits.ndim != 4 or tuple(logits.shape[1:]) != plan.window:
            raise ShapeError(f"model returned {logits.shape} for window {plan.window}")
        if acc is None:
            acc = np.zeros((logits.shape[0],) + plan.volume_extents, dtype=np.float64)
        acc[(slice(None),) + sl] += logits * weights
        norm[sl] += weights
    return (acc / norm).astype(np.float32)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Voxelwise argmax over the channel axis; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim < 1 or logits.shape[0] < 1:
        raise ShapeError("logits need at least one channel")
    return np.argmax(logits, axis=0).astype(np.uint16)
