"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-2
    step_count: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: OptimizerState) -> None:
    """Apply one AdamW update in place and advance ``state.step_count``.

    Weight decay is applied to the pre-update parameter as
    ``p <- p * (1 - lr * wd)``, then the bias-corrected Adam step.
    """
    if set(params) != set(state.exp_avg):
        raise ContractError("optimizer state does not cover exactly the trainable parameters")
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        if grads[name].shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {grads[name].shape}, parameter {params[name].shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.lr
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    decay = 1.0 - lr * state.weight_decay
    for name, p in params.items():
        g = grads[name]
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if decay != 1.0:
            p.data *= decay
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= lr * update
