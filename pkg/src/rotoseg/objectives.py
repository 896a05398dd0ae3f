"""Masked-reconstruction and DiceCE training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class MaskPlan:
    mask_ratio: float
    mask: np.ndarray  # [n_tokens] bool
    seed: int | None = None

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def masked_count(n_tokens: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * n_tokens + 0.5))


def make_mask_plan(n_tokens: int, mask_ratio: float = 0.6, seed=None,
                   rng: np.random.Generator | None = None) -> MaskPlan:
    """Mask exactly round(mask_ratio * n_tokens) tokens chosen uniformly.

    Reproducible from ``(seed, n_tokens, mask_ratio)``; pass ``rng`` instead
    to draw from a running generator.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    count = masked_count(n_tokens, mask_ratio)
    if count == 0:
        raise ConfigError(f"mask_ratio {mask_ratio} masks no tokens out of {n_tokens}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    mask = np.zeros(n_tokens, dtype=bool)
    mask[rng.permutation(n_tokens)[:count]] = True
    return MaskPlan(mask_ratio, mask, seed)


def voxel_mask(plan: MaskPlan, extents, patch_size) -> np.ndarray:
    """Expand the per-token mask to a [D, H, W] boolean voxel mask."""
    grid = tuple(e // p for e, p in zip(extents, patch_size))
    if any(e % p for e, p in zip(extents, patch_size)):
        raise ShapeError(f"extents {tuple(extents)} not divisible by patch size {tuple(patch_size)}")
    if int(np.prod(grid)) != plan.mask.size:
        raise ContractError(f"mask plan has {plan.mask.size} tokens, volume grid {grid} has {int(np.prod(grid))}")
    m = plan.mask.reshape(grid)
    for axis, p in enumerate(patch_size):
        m = np.repeat(m, p, axis=axis)
    return m


def mim_loss(recon: Tensor, target, plan: MaskPlan, patch_size) -> Tensor:
    """Mean squared error over voxels of masked patches only."""
    target = np.asarray(target.array if hasattr(target, "array") else target)
    if target.ndim == 3:
        target = target[None]
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} and target {target.shape} differ")
    vm = voxel_mask(plan, recon.shape[1:], patch_size)
    weight = np.broadcast_to(vm, recon.shape).astype(recon.dtype)
    diff = recon - Tensor(target, dtype=recon.dtype)
    denom = float(weight.sum())
    return (diff * diff * weight).sum() * (1.0 / denom)


def _check_labels(labels: np.ndarray, num_classes: int, spatial) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 4 and labels.shape[0] == 1:
        labels = labels[0]
    if labels.shape != tuple(spatial):
        raise ShapeError(f"labels {labels.shape} do not match logits spatial extents {tuple(spatial)}")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[idx]} at voxel {idx} outside [0, {num_classes})")
    return labels


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    return (labels.reshape(1, -1) == np.arange(num_classes)[:, None]).astype(dtype)


def soft_dice_loss(logits: Tensor, labels, eps: float = 1e-5) -> Tensor:
    """1 - mean foreground soft Dice, with softmax over the channel axis."""
    c, *spatial = logits.shape
    if c < 2:
        raise ConfigError("soft Dice needs at least one foreground class")
    labels = _check_labels(labels, c, spatial)
    n = int(np.prod(spatial))
    probs = T.softmax(logits.reshape(c, n), axis=0)[1:]
    onehot = _one_hot(labels, c, logits.dtype)[1:]
    inter = (probs * onehot).sum(axis=1)
    denom = probs.sum(axis=1) + onehot.sum(axis=1) + eps
    dice = (inter * 2.0 + eps) / denom
    return 1.0 - dice.mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Voxelwise softmax cross-entropy averaged over every voxel."""
    c, *spatial = logits.shape
    labels = _check_labels(labels, c, spatial)
    n = int(np.prod(spatial))
    logp = T.log_softmax(logits.reshape(c, n), axis=0)
    onehot = _one_hot(labels, c, logits.dtype)
    return -(logp * onehot).sum() * (1.0 / n)


def dice_ce(logits: Tensor, labels, eps: float = 1e-5) -> Tensor:
    return soft_dice_loss(logits, labels, eps) + cross_entropy_loss(logits, labels)
