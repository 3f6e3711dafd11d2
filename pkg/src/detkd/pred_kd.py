"""Prediction-level distillation and total-loss composition.

Class-score layouts put background at column 0 and foreground classes at
columns ``1..C``.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12

HOMOGENEOUS_PARTS = ("gt", "feat", "ckd", "cls", "reg")
HETEROGENEOUS_PARTS = ("gt", "feat", "ckd", "cls_dense")


def cls_kd_loss(p_t, p_s: Tensor) -> Tensor:
    """Cross-entropy of student scores under the teacher distribution, mean over rows."""
    p_t = T.as_tensor(p_t)
    if p_t.shape != p_s.shape:
        raise ValueError(f"score shapes differ: {p_t.shape} vs {p_s.shape}")
    logp = T.log(T.clamp_min(p_s, PROB_FLOOR))
    return T.scale(T.tsum(T.mul(p_t, logp)), -1.0 / p_s.shape[0])


def naive_reg_kd(reg_t, reg_s: Tensor) -> Tensor:
    """L1 over the 4 coordinates (summed), averaged over proposals."""
    reg_t = T.as_tensor(reg_t)
    if reg_t.shape != reg_s.shape:
        raise ValueError(f"regression shapes differ: {reg_t.shape} vs {reg_s.shape}")
    n = reg_s.shape[0]
    if n == 0:
        return Tensor(0.0)
    return T.scale(T.tsum(T.tabs(T.sub(reg_t, reg_s))), 1.0 / n)


def class_aware_reg_loss(p_t_fg, reg_t, reg_s: Tensor) -> Tensor:
    """``1/N sum_n | sum_i p_t^i (reg_t^i - reg_s^i) |_1`` over foreground classes.

    The absolute value is taken after the class-weighted sum, so opposite
    deviations on different classes can cancel.
    """
    p = np.asarray(p_t_fg.data if isinstance(p_t_fg, Tensor) else p_t_fg, dtype=np.float64)
    reg_t = T.as_tensor(reg_t)
    n, c = p.shape
    if reg_s.shape != (n, c, 4) or reg_t.shape != (n, c, 4):
        raise ValueError(f"expected regressions of shape {(n, c, 4)}, got {reg_t.shape} / {reg_s.shape}")
    if n == 0:
        return Tensor(0.0)
    weights = np.repeat(p[:, :, None], 4, axis=2)
    weighted = T.tsum(T.mul(T.sub(reg_t, reg_s), weights), axis=1)  # (N, 4)
    return T.scale(T.tsum(T.tabs(weighted)), 1.0 / n)


def convert_dense_logits(logits: Tensor) -> Tensor:
    """``softmax(L) / rowmax(softmax(L))`` restricted to the foreground columns."""
    p = T.softmax(logits, axis=1)
    m = T.tmax(p, axis=1, keepdims=True)
    scaled = T.div(p, T.broadcast_to(m, p.shape))
    return T.take(scaled, (slice(None), slice(1, None)))


def gather_class(reg: Tensor, labels: np.ndarray) -> Tensor:
    """Rows of ``(N, C, 4)`` regressions at 1-based foreground labels -> ``(N, 4)``."""
    labels = np.asarray(labels, dtype=np.int64)
    return T.take(reg, (np.arange(len(labels)), labels - 1))


def total_loss(
    parts: Mapping[str, Tensor | float],
    mode: str = "homogeneous",
    weights: Mapping[str, float] | None = None,
) -> Tensor:
    """Weighted sum of loss parts; parts outside the mode's recipe are an error."""
    if mode == "homogeneous":
        allowed = HOMOGENEOUS_PARTS
    elif mode == "heterogeneous":
        allowed = HETEROGENEOUS_PARTS
    else:
        raise ValueError(f"unknown mode {mode!r}")
    bad = [k for k in parts if k not in allowed]
    if bad:
        raise ValueError(f"parts {bad} are not valid in {mode} mode (allowed: {list(allowed)})")
    weights = weights or {}
    total = Tensor(0.0)
    for name in allowed:
        if name in parts and parts[name] is not None:
            total = T.add(total, T.scale(T.as_tensor(parts[name]), weights.get(name, 1.0)))
    return total
