"""Rotary 3D transformer for volumetric segmentation.

Pipeline: non-overlapping patch embedding -> pre-norm encoder blocks
(RoPE self-attention and SwiGLU, each branch scaled by LayerScale and
wrapped in DropPath) -> final LayerNorm -> light decoder of x2 transposed
convolutions with instance norm and SiLU -> 1x1x1 projection head.

Parameters live in a plain ordered ``dict`` (the ParamStore) keyed by dotted
names. Encoder tensors start with ``enc.``, decoder tensors with ``dec.``,
and the two output projections with ``head.``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rope3d import RopeTable, build_rope_table, lattice_coords, rope_attention
from .tensor import Tensor

ParamStore = dict  # dict[str, Tensor], insertion-ordered


def _default_hidden(embed_dim: int) -> int:
    return int(math.ceil(round(8 * embed_dim / 3) / 8) * 8)


@dataclass
class ModelConfig:
    patch_size: tuple[int, int, int] = (8, 8, 8)
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    swiglu_hidden: int | None = None
    layerscale_init: float = 0.1
    droppath_rate: float = 0.2
    num_classes: int = 2
    in_channels: int = 1
    rope_base: float = 10000.0
    min_decoder_channels: int = 4

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in (
            (self.patch_size,) * 3 if np.isscalar(self.patch_size) else self.patch_size))
        if self.swiglu_hidden is None:
            self.swiglu_hidden = _default_hidden(self.embed_dim)
        if len(self.patch_size) != 3 or any(p < 1 or p & (p - 1) for p in self.patch_size):
            raise ConfigError(f"patch_size components must be powers of two, got {self.patch_size}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % 6:
            raise ConfigError(f"head dim {self.embed_dim // self.heads} must be divisible by 6")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError(f"droppath_rate must be in [0, 1), got {self.droppath_rate}")
        if self.layerscale_init <= 0:
            raise ConfigError(f"layerscale_init must be positive, got {self.layerscale_init}")
        if self.depth < 0 or self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("depth must be >= 0, num_classes and in_channels >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def decoder_strides(self) -> list[tuple[int, int, int]]:
        """Per-stage upsampling factors; x2 on every axis that still needs it."""
        stages = max(int(math.log2(p)) for p in self.patch_size)
        return [tuple(2 if (1 << i) < p else 1 for p in self.patch_size) for i in range(stages)]

    @property
    def decoder_channels(self) -> list[int]:
        chans, c = [], self.embed_dim
        for _ in self.decoder_strides:
            c = max(c // 2, self.min_decoder_channels)
            chans.append(c)
        return chans

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenGrid:
    tokens: Tensor  # [n_tokens, embed_dim]
    lattice: np.ndarray  # [n_tokens, 3], z-major
    grid_extents: tuple[int, int, int]


# -- parameters ----------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=None) -> ParamStore:
    """Fresh ParamStore: trunc-normal weights, zero biases, unit norm gains."""
    dtype = dtype or T.default_dtype()
    d, h = cfg.embed_dim, cfg.swiglu_hidden
    patch_len = cfg.in_channels * int(np.prod(cfg.patch_size))
    p: ParamStore = {}

    def add(name, value):
        p[name] = Tensor(np.asarray(value), requires_grad=True, dtype=dtype, name=name)

    add("enc.patch_embed.weight", trunc_normal(rng, (patch_len, d)))
    add("enc.patch_embed.bias", np.zeros(d))
    add("enc.mask_token", trunc_normal(rng, (d,)))
    for i in range(cfg.depth):
        b = f"enc.block{i}"
        add(f"{b}.norm1.weight", np.ones(d))
        add(f"{b}.norm1.bias", np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            add(f"{b}.attn.{w}", trunc_normal(rng, (d, d)))
        add(f"{b}.attn.bo", np.zeros(d))
        add(f"{b}.ls1", np.full(d, cfg.layerscale_init))
        add(f"{b}.norm2.weight", np.ones(d))
        add(f"{b}.norm2.bias", np.zeros(d))
        add(f"{b}.mlp.w_gate", trunc_normal(rng, (d, h)))
        add(f"{b}.mlp.w_up", trunc_normal(rng, (d, h)))
        add(f"{b}.mlp.w_down", trunc_normal(rng, (h, d)))
        add(f"{b}.ls2", np.full(d, cfg.layerscale_init))
    add("enc.norm.weight", np.ones(d))
    add("enc.norm.bias", np.zeros(d))

    cin = d
    for i, (stride, cout) in enumerate(zip(cfg.decoder_strides, cfg.decoder_channels)):
        add(f"dec.stage{i}.up.weight", trunc_normal(rng, (cin, cout) + stride))
        add(f"dec.stage{i}.up.bias", np.zeros(cout))
        add(f"dec.stage{i}.norm.weight", np.ones(cout))
        add(f"dec.stage{i}.norm.bias", np.zeros(cout))
        cin = cout

    add("head.seg.weight", trunc_normal(rng, (cfg.num_classes, cin)))
    add("head.seg.bias", np.zeros(cfg.num_classes))
    add("head.mim.weight", trunc_normal(rng, (cfg.in_channels, cin)))
    add("head.mim.bias", np.zeros(cfg.in_channels))
    return p


def trainable_names(params: Mapping[str, Tensor], objective: str) -> list[str]:
    """Parameters that receive gradients under ``objective`` ('seg' or 'mim')."""
    if objective == "mim":
        return [n for n in params if not n.startswith("head.seg.")]
    if objective == "seg":
        return [n for n in params if not n.startswith("head.mim.") and n != "enc.mask_token"]
    raise ConfigError(f"unknown objective {objective!r}")


# -- building blocks -----------------------------------------------------------


def patch_embed(vol, params: Mapping[str, Tensor], cfg: ModelConfig) -> TokenGrid:
    """Flatten non-overlapping patches of ``vol`` [c, D, H, W] and project them."""
    x = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol), dtype=params["enc.patch_embed.weight"].dtype)
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected volume [{cfg.in_channels}, D, H, W], got {x.shape}")
    c, *spatial = x.shape
    for extent, p, axis in zip(spatial, cfg.patch_size, "DHW"):
        if extent % p:
            raise ShapeError(f"volume extent {axis}={extent} must be a multiple of patch size {p}")
    (pz, py, px) = cfg.patch_size
    gz, gy, gx = spatial[0] // pz, spatial[1] // py, spatial[2] // px
    x = x.reshape(c, gz, pz, gy, py, gx, px).transpose(1, 3, 5, 0, 2, 4, 6)
    x = x.reshape(gz * gy * gx, c * pz * py * px)
    tokens = x @ params["enc.patch_embed.weight"] + params["enc.patch_embed.bias"]
    return TokenGrid(tokens, lattice_coords((gz, gy, gx)), (gz, gy, gx))


def drop_path(branch: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth for a single sample: drop the whole branch with prob ``rate``."""
    if not train_mode or rate == 0.0:
        return branch
    if rng is None:
        raise ContractError("train-mode DropPath needs an rng")
    keep = rng.random() >= rate
    return branch * ((1.0 / (1.0 - rate)) if keep else 0.0)


def swiglu_mlp(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    if w_gate.shape != w_up.shape or w_down.shape != w_gate.shape[::-1]:
        raise ShapeError(f"SwiGLU weight shapes disagree: {w_gate.shape}, {w_up.shape}, {w_down.shape}")
    return (T.silu(x @ w_gate) * (x @ w_up)) @ w_down


def self_attention(x: Tensor, coords: np.ndarray, params, prefix: str, cfg: ModelConfig,
                   table: RopeTable) -> Tensor:
    n, d = x.shape
    hd = cfg.head_dim

    def heads(w):
        return (x @ params[f"{prefix}.{w}"]).reshape(n, cfg.heads, hd).transpose(1, 0, 2)

    out = rope_attention(heads("wq"), heads("wk"), heads("wv"), coords, table)
    out = out.transpose(1, 0, 2).reshape(n, d)
    return out @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def encoder_block(grid: TokenGrid, params, cfg: ModelConfig, index: int, train_mode: bool = False,
                  rng: np.random.Generator | None = None, table: RopeTable | None = None) -> TokenGrid:
    b = f"enc.block{index}"
    table = table or build_rope_table(cfg.head_dim, cfg.rope_base, grid.grid_extents)
    x = grid.tokens
    h = T.layer_norm(x, params[f"{b}.norm1.weight"], params[f"{b}.norm1.bias"])
    h = self_attention(h, grid.lattice, params, f"{b}.attn", cfg, table) * params[f"{b}.ls1"]
    x = x + drop_path(h, cfg.droppath_rate, train_mode, rng)
    h = T.layer_norm(x, params[f"{b}.norm2.weight"], params[f"{b}.norm2.bias"])
    h = swiglu_mlp(h, params[f"{b}.mlp.w_gate"], params[f"{b}.mlp.w_up"], params[f"{b}.mlp.w_down"])
    x = x + drop_path(h * params[f"{b}.ls2"], cfg.droppath_rate, train_mode, rng)
    return TokenGrid(x, grid.lattice, grid.grid_extents)


def encode(grid: TokenGrid, params, cfg: ModelConfig, train_mode: bool = False,
           rng: np.random.Generator | None = None) -> TokenGrid:
    table = build_rope_table(cfg.head_dim, cfg.rope_base, grid.grid_extents)
    for i in range(cfg.depth):
        grid = encoder_block(grid, params, cfg, i, train_mode, rng, table)
    x = T.layer_norm(grid.tokens, params["enc.norm.weight"], params["enc.norm.bias"])
    return TokenGrid(x, grid.lattice, grid.grid_extents)


def decoder_forward(grid: TokenGrid, params, cfg: ModelConfig, head: str = "seg") -> Tensor:
    """Upsample tokens back to voxel resolution and apply ``head`` ('seg' or 'mim')."""
    if head not in ("seg", "mim"):
        raise ConfigError(f"unknown head {head!r}")
    gz, gy, gx = grid.grid_extents
    x = grid.tokens.transpose(1, 0).reshape(cfg.embed_dim, gz, gy, gx)
    for i, stride in enumerate(cfg.decoder_strides):
        s = f"dec.stage{i}"
        x = T.conv_transpose3d(x, params[f"{s}.up.weight"], stride)
        c = x.shape[0]
        x = x + params[f"{s}.up.bias"].reshape(c, 1, 1, 1)
        x = T.instance_norm(x, params[f"{s}.norm.weight"], params[f"{s}.norm.bias"])
        x = T.silu(x)
    c, *spatial = x.shape
    w, b = params[f"head.{head}.weight"], params[f"head.{head}.bias"]
    out = w @ x.reshape(c, int(np.prod(spatial))) + b.reshape(-1, 1)
    return out.reshape(w.shape[0], *spatial)


def forward_seg(vol, params, cfg: ModelConfig, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Segmentation logits [num_classes, D, H, W] for ``vol`` [c, D, H, W]."""
    grid = encode(patch_embed(vol, params, cfg), params, cfg, train_mode, rng)
    return decoder_forward(grid, params, cfg, "seg")


def apply_mask_token(grid: TokenGrid, mask, params) -> TokenGrid:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (grid.tokens.shape[0],):
        raise ContractError(f"mask has {mask.size} entries for {grid.tokens.shape[0]} tokens")
    tokens = T.where(mask[:, None], params["enc.mask_token"], grid.tokens)
    return TokenGrid(tokens, grid.lattice, grid.grid_extents)


def forward_mim(vol, mask, params, cfg: ModelConfig, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Reconstruction [in_channels, D, H, W] with masked tokens replaced by the mask token."""
    grid = apply_mask_token(patch_embed(vol, params, cfg), mask, params)
    grid = encode(grid, params, cfg, train_mode, rng)
    return decoder_forward(grid, params, cfg, "mim")


@dataclass
class SegmentationModel:
    """Eval-mode callable wrapper: numpy window in, numpy logits out."""

    params: ParamStore
    cfg: ModelConfig
    calls: int = field(default=0, compare=False)

    def __call__(self, window: np.ndarray) -> np.ndarray:
        self.calls += 1
        with T.no_grad():
            return forward_seg(window, self.params, self.cfg).data
