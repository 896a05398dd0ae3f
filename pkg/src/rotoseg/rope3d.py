"""Axial 3D rotary position embeddings on the patch lattice.

Each head's channels are split into three contiguous groups of equal width,
one per lattice axis (z, y, x). Inside a group, channel pair (2t, 2t+1) is
rotated by ``coord_axis * theta_t`` with ``theta_t = base ** (-2t / group)``.
Because every group only sees its own axis, attention logits depend on the
coordinate difference between query and key alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, grad_enabled, matmul, softmax, transpose


@dataclass(frozen=True)
class RopeTable:
    head_dim: int
    base: float
    freqs: np.ndarray  # [head_dim // 6]
    max_extent: tuple[int, int, int]
    cos: tuple[np.ndarray, np.ndarray, np.ndarray]  # per axis, [extent, head_dim // 6]
    sin: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def pairs_per_axis(self) -> int:
        return self.head_dim // 6


def build_rope_table(head_dim: int, base: float = 10000.0, max_extent_zyx=(1, 1, 1)) -> RopeTable:
    if head_dim <= 0 or head_dim % 6:
        raise ConfigError(f"head_dim must be a positive multiple of 6 for axial 3D RoPE, got {head_dim}")
    extents = tuple(int(e) for e in max_extent_zyx)
    if len(extents) != 3 or min(extents) < 1:
        raise ConfigError(f"max extents must be three positive integers, got {max_extent_zyx}")
    group = head_dim // 3
    t = np.arange(head_dim // 6, dtype=np.float64)
    freqs = float(base) ** (-2.0 * t / group)
    cos, sin = [], []
    for extent in extents:
        angles = np.arange(extent, dtype=np.float64)[:, None] * freqs[None, :]
        cos.append(np.cos(angles))
        sin.append(np.sin(angles))
    for arr in cos + sin:
        arr.setflags(write=False)
    freqs.setflags(write=False)
    return RopeTable(head_dim, float(base), freqs, extents, tuple(cos), tuple(sin))


def lattice_coords(grid_extents) -> np.ndarray:
    """Integer (z, y, x) triples for every token, z-major."""
    gz, gy, gx = (int(g) for g in grid_extents)
    z, y, x = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    return np.stack([z.ravel(), y.ravel(), x.ravel()], axis=1)


def _token_angles(coords: np.ndarray, table: RopeTable, dtype):
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"coords must be [tokens, 3], got {coords.shape}")
    if coords.min(initial=0) < 0 or np.any(coords.max(axis=0, initial=0) >= np.array(table.max_extent)):
        raise ShapeError(f"coords exceed RoPE table extents {table.max_extent}")
    cos = np.concatenate([table.cos[a][coords[:, a]] for a in range(3)], axis=1)
    sin = np.concatenate([table.sin[a][coords[:, a]] for a in range(3)], axis=1)
    return cos.astype(dtype), sin.astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(qk: Tensor, coords: np.ndarray, table: RopeTable, inverse: bool = False) -> Tensor:
    """Rotate channel pairs of ``qk`` [heads, tokens, head_dim] by lattice position.

    ``inverse=True`` rotates by the negated coordinates, undoing the forward map.
    """
    if qk.ndim != 3 or qk.shape[-1] != table.head_dim:
        raise ShapeError(f"apply_rope expects [heads, tokens, {table.head_dim}], got {qk.shape}")
    if qk.shape[1] != len(coords):
        raise ShapeError(f"token count {qk.shape[1]} does not match {len(coords)} coordinates")
    cos, sin = _token_angles(coords, table, qk.dtype)
    if inverse:
        sin = -sin

    def rope_backward(g):
        return (_rotate(g, cos, -sin),)

    return Tensor._from_op(_rotate(qk.data, cos, sin), (qk,), rope_backward)


def rope_attention(q: Tensor, k: Tensor, v: Tensor, coords: np.ndarray, table: RopeTable,
                   chunk: int = 1024) -> Tensor:
    """softmax(rope(q) rope(k)^T / sqrt(head_dim)) v, per head.

    Without graph recording the logits are built ``chunk`` query rows at a
    time so long sequences (thousands of tokens) fit in memory.
    """
    if not (q.shape == k.shape and q.shape[:2] == v.shape[:2]):
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    qr = apply_rope(q, coords, table)
    kr = apply_rope(k, coords, table)
    scale = 1.0 / math.sqrt(q.shape[-1])
    recording = grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)
    if recording:
        logits = matmul(qr, transpose(kr, (0, 2, 1))) * scale
        return matmul(softmax(logits, -1), v)

    kt = np.swapaxes(kr.data, 1, 2)
    out = np.empty(v.shape[:2] + v.shape[2:], dtype=v.dtype)
    for start in range(0, q.shape[1], chunk):
        block = np.matmul(qr.data[:, start:start + chunk], kt) * q.dtype.type(scale)
        block -= block.max(axis=-1, keepdims=True)
        np.exp(block, out=block)
        block /= block.sum(axis=-1, keepdims=True)
        out[:, start:start + chunk] = np.matmul(block, v.data)
    return Tensor(out, dtype=v.dtype)
