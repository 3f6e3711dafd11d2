"""SGD with momentum and L2 weight decay under a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

REFERENCE_MOMENTUM = 0.9
REFERENCE_WEIGHT_DECAY = 1e-4
REFERENCE_BASE_LR = 0.03


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr0
    t = min(max(t, 0), total)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    total_steps: int
    lr0: float = REFERENCE_BASE_LR
    lr_min: float = 0.0
    momentum: float = REFERENCE_MOMENTUM
    weight_decay: float = REFERENCE_WEIGHT_DECAY
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, t: int | None = None) -> float:
        return cosine_lr(self.step if t is None else t, self.total_steps, self.lr0, self.lr_min)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One in-place update of every parameter that has a gradient.

    buffer <- mu * buffer + grad + wd * param;  param <- param - lr(t) * buffer
    """
    if state.step >= state.total_steps:
        raise ValueError(f"optimizer already ran its {state.total_steps} steps")
    lr = state.lr()
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        elif buf.shape != p.shape:
            raise ValueError(f"{name}: momentum buffer shape {buf.shape} != param shape {p.shape}")
        buf = state.momentum * buf + g + state.weight_decay * p.data
        state.buffers[name] = buf
        p.data = p.data - lr * buf
    state.step += 1
