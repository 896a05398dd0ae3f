"""Finite-difference gradient suites for every differentiable building block.

Each case builds float64 inputs from a seeded generator and compares the
backprop gradient of a random-weighted sum against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, TokenGrid, encoder_block, forward_seg, init_params, swiglu_mlp
from .objectives import dice_ce, make_mask_plan, mim_loss
from .rope3d import build_rope_table, lattice_coords, rope_attention
from .tensor import Tensor, check_mode, finite_difference_check

STEP = 1e-3
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3

_COORDS = lattice_coords((1, 2, 2))
_TABLE = build_rope_table(6, max_extent_zyx=(1, 2, 2))

# name -> rng -> (input arrays, op on tensors)
OP_CASES: dict[str, Callable] = {
    "matmul": lambda rng: ([rng.standard_normal((3, 4)), rng.standard_normal((2, 4, 5))],
                           lambda a, b: a @ b),
    "add_broadcast": lambda rng: ([rng.standard_normal((3, 4)), rng.standard_normal(4)], lambda a, b: a + b),
    "mul_div": lambda rng: ([rng.standard_normal((3, 4)), rng.uniform(0.5, 2, (3, 1))], lambda a, b: a * b / b / b),
    "exp_log": lambda rng: ([rng.uniform(0.5, 2, (6,))], lambda a: T.log(a) * T.exp(a)),
    "sigmoid": lambda rng: ([rng.standard_normal((4, 5)) * 3], T.sigmoid),
    "silu": lambda rng: ([rng.standard_normal((4, 5)) * 3], T.silu),
    "softmax": lambda rng: ([rng.standard_normal((4, 7))], lambda a: T.softmax(a, -1)),
    "softmax_axis0": lambda rng: ([rng.standard_normal((3, 5))], lambda a: T.softmax(a, 0)),
    "log_softmax": lambda rng: ([rng.standard_normal((3, 6))], lambda a: T.log_softmax(a, 0)),
    "layer_norm": lambda rng: ([rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)],
                               T.layer_norm),
    "instance_norm": lambda rng: ([rng.standard_normal((3, 2, 3, 2)), rng.standard_normal(3), rng.standard_normal(3)],
                                  T.instance_norm),
    "conv_transpose3d": lambda rng: ([rng.standard_normal((2, 2, 1, 2)), rng.standard_normal((2, 3, 2, 2, 2))],
                                     lambda x, k: T.conv_transpose3d(x, k, 2)),
    "reshape_transpose": lambda rng: ([rng.standard_normal((2, 3, 4))],
                                      lambda a: a.reshape(6, 4).transpose(1, 0) * 2.0),
    "getitem_mean": lambda rng: ([rng.standard_normal((4, 5))], lambda a: a[1:3].mean(axis=1, keepdims=True) * a[1:3]),
    "where": lambda rng: ([rng.standard_normal(5), rng.standard_normal((3, 5))],
                          lambda a, b: T.where(np.array([True, False, True])[:, None], a, b)),
    "concat": lambda rng: ([rng.standard_normal((2, 3)), rng.standard_normal((1, 3))],
                           lambda a, b: T.concat([a, b], 0)),
    "rope_attention": lambda rng: ([rng.standard_normal((2, 4, 6)) for _ in range(3)],
                                   lambda q, k, v: rope_attention(q, k, v, _COORDS, _TABLE)),
    "swiglu": lambda rng: ([rng.standard_normal(s) for s in [(3, 4), (4, 8), (4, 8), (8, 4)]], swiglu_mlp),
}


@dataclass(frozen=True)
class GradResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def check_op(name: str, seed: int) -> GradResult:
    rng = np.random.default_rng(seed)
    with check_mode():
        arrays, op = OP_CASES[name](rng)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        weights = rng.standard_normal(op(*tensors).shape)
        err = finite_difference_check(lambda: _weighted_sum(op(*tensors), weights), tensors, h=STEP)
    return GradResult(name, seed, err, OP_TOLERANCE)


def check_losses(seed: int) -> GradResult:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (2, 3, 2))
    plan = make_mask_plan(8, 0.5, seed=seed)
    target = rng.standard_normal((1, 4, 4, 4))
    with check_mode():
        x = Tensor(rng.standard_normal((3, 2, 3, 2)), requires_grad=True)
        r = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
        err = max(finite_difference_check(lambda: dice_ce(x, labels), [x], h=STEP),
                  finite_difference_check(lambda: mim_loss(r, target, plan, (2, 2, 2)), [r], h=STEP))
    return GradResult("dice_ce+mim_loss", seed, err, OP_TOLERANCE)


def _rescale(params, rng):
    # move norm gains, biases and LayerScale away from their init so every
    # path carries signal, and enlarge weights so attention is not uniform
    for n, p in params.items():
        if p.ndim == 1:
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data *= 20.0


def check_encoder_block(seed: int, max_entries: int = 24) -> GradResult:
    """One block on a 2x2x2 token grid in train mode with a replayed DropPath draw."""
    cfg = ModelConfig(embed_dim=12, depth=1, heads=2, droppath_rate=0.2)
    rng = np.random.default_rng(seed)
    with check_mode():
        params = init_params(cfg, rng)
        _rescale(params, rng)
        names = [n for n in params if n.startswith("enc.block0.")]
        x = Tensor(rng.standard_normal((8, 12)), requires_grad=True)
        weights = rng.standard_normal((8, 12))
        coords = lattice_coords((2, 2, 2))
        table = build_rope_table(cfg.head_dim, cfg.rope_base, (2, 2, 2))
        drop_seed = int(rng.integers(2 ** 31))

        def loss():
            grid = TokenGrid(x, coords, (2, 2, 2))
            out = encoder_block(grid, params, cfg, 0, True, np.random.default_rng(drop_seed), table)
            return _weighted_sum(out.tokens, weights)

        tensors = [x] + [params[n] for n in names]
        err = finite_difference_check(loss, tensors, h=STEP, max_entries=max_entries, rng=rng)
    return GradResult("encoder_block", seed, err, OP_TOLERANCE)


def check_end_to_end(seed: int, max_entries: int = 6) -> GradResult:
    """DiceCE through the full tiny network (dim 12, depth 1, 16^3 volume)."""
    cfg = ModelConfig(embed_dim=12, depth=1, heads=2, num_classes=3)
    rng = np.random.default_rng(seed)
    with check_mode():
        params = init_params(cfg, rng)
        _rescale(params, rng)
        vol = rng.standard_normal((1, 16, 16, 16))
        labels = rng.integers(0, 3, (16, 16, 16))
        tensors = list(params.values())
        err = finite_difference_check(lambda: dice_ce(forward_seg(vol, params, cfg), labels), tensors,
                                      h=STEP, max_entries=max_entries, rng=rng)
    return GradResult("end_to_end", seed, err, END_TO_END_TOLERANCE)


def run_suite(seeds: int = 10, end_to_end_seeds: int = 2, log: Callable[[str], None] | None = None) -> list[GradResult]:
    """Every op case, the losses and one encoder block over ``seeds`` seeds, plus the end-to-end check."""
    results: list[GradResult] = []
    start = time.perf_counter()

    def record(r: GradResult):
        results.append(r)
        if log is not None:
            log(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<20} seed {r.seed:<3} max rel err {r.error:.3e}")

    for seed in range(seeds):
        for name in OP_CASES:
            record(check_op(name, seed))
        record(check_losses(seed))
        record(check_encoder_block(seed))
    for seed in range(end_to_end_seeds):
        record(check_end_to_end(seed))
    if log is not None:
        log(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {time.perf_counter() - start:.1f} s")
    return results
