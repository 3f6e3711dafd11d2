"""Semantic-guided feature imitation and the mask-based imitation baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Box, LabeledProposal, boxes_to_array
from .models import AdaptationMap, EmbedNet, FeaturePyramid, Module, UnsupportedPairError, roi_align_batch
from .tensor import Tensor


@dataclass
class SgfiConfig:
    tau_init: float = 1.0
    c_key: int = 16
    roi_size: int = 4
    positives_only: bool = True


class SgfiModule(Module):
    """f_adap, f_embed and the log-temperature, trained alongside the student."""

    def __init__(self, c_student: int, c_teacher: int, student_levels: int, cfg: SgfiConfig, rng: np.random.Generator):
        if cfg.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        self.adap = AdaptationMap(c_student, c_teacher, student_levels, rng)
        self.embed = EmbedNet(c_teacher, cfg.c_key, cfg.roi_size, rng)
        self.log_tau = Tensor(math.log(cfg.tau_init), requires_grad=True)
        self.cfg = cfg

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))


def compute_match_weights(student_keys, teacher_key, tau) -> Tensor:
    """Softmax over levels of ``K_s . K_t / tau``.

    ``student_keys`` is ``(L, C_key)`` or ``(N, L, C_key)``; ``teacher_key`` is
    ``(C_key,)`` or ``(N, C_key)``; ``tau`` is a positive float or a scalar Tensor.
    """
    ks, kt = T.as_tensor(student_keys), T.as_tensor(teacher_key)
    tau = T.as_tensor(tau)
    if np.any(tau.data <= 0):
        raise ValueError("tau must be positive")
    single = ks.ndim == 2
    if single:
        ks = T.reshape(ks, (1,) + ks.shape)
        kt = T.reshape(kt, (1,) + kt.shape)
    scores = T.tsum(T.mul(ks, T.broadcast_to(T.reshape(kt, (kt.shape[0], 1, kt.shape[1])), ks.shape)), axis=-1)
    alpha = T.softmax(T.div(scores, T.broadcast_to(tau, scores.shape)), axis=-1)
    return T.reshape(alpha, (alpha.shape[1],)) if single else alpha


def sgfi_core(adapted: Tensor, student_keys: Tensor, teacher_keys: Tensor, tau, teacher_feats) -> tuple[Tensor, Tensor]:
    """Loss from already-adapted student RoI features.

    adapted ``(N, L, F)``; student_keys ``(N, L, K)``; teacher_keys ``(N, K)``;
    teacher_feats ``(N, F)``.  Returns ``(loss, alpha)``.
    """
    teacher_feats = T.as_tensor(teacher_feats)
    n, levels, f = adapted.shape
    alpha = compute_match_weights(student_keys, teacher_keys, tau)
    w = T.broadcast_to(T.reshape(alpha, (n, levels, 1)), adapted.shape)
    agg = T.tsum(T.mul(w, adapted), axis=1)
    return T.mse(agg, teacher_feats), alpha


def sgfi_from_rois(
    student_rois: Sequence[Tensor], teacher_feats: np.ndarray, sgfi: SgfiModule
) -> tuple[Tensor, Tensor]:
    """Student RoI features per level ``(N, P*P*C_s)`` against teacher ``(N, P*P*C_t)``."""
    n = teacher_feats.shape[0]
    p = sgfi.cfg.roi_size
    c_s, c_t = sgfi.adap.c_student, sgfi.adap.c_teacher
    adapted = []
    for lvl, feats in enumerate(student_rois):
        a = sgfi.adap(T.reshape(feats, (n * p * p, c_s)), lvl)
        adapted.append(T.reshape(a, (n, p * p * c_t)))
    levels = len(adapted)
    stacked = T.stack(adapted, axis=1)  # (N, L, F)
    keys_s = sgfi.embed(T.reshape(stacked, (n * levels, p * p * c_t)))
    keys_s = T.reshape(keys_s, (n, levels, keys_s.shape[-1]))
    keys_t = sgfi.embed(Tensor(teacher_feats))
    return sgfi_core(stacked, keys_s, keys_t, T.exp(sgfi.log_tau), teacher_feats)


def sgfi_loss(
    proposals: Sequence[LabeledProposal],
    student_pyramid: FeaturePyramid,
    teacher_pyramid: FeaturePyramid,
    sgfi: SgfiModule,
    return_weights: bool = False,
):
    """Cross-level imitation averaged over proposals (0 for an empty set).

    The teacher feature comes from each proposal's assigned level; the student
    contributes RoI features from every one of its levels.
    """
    if sgfi.adap.c_teacher != teacher_pyramid.channels or sgfi.adap.c_student != student_pyramid.channels:
        raise ValueError("SGFI channel configuration does not match the pyramids")
    if len(sgfi.adap.maps) != student_pyramid.num_levels:
        raise ValueError("one adaptation map per student level is required")
    if not proposals:
        zero = Tensor(0.0)
        return (zero, np.zeros((0, student_pyramid.num_levels))) if return_weights else zero
    boxes = boxes_to_array([p.box for p in proposals])
    t_levels = np.array([p.assigned_level for p in proposals])
    p = sgfi.cfg.roi_size
    teacher = roi_align_batch(teacher_pyramid, boxes, t_levels, p).data
    student = [roi_align_batch(student_pyramid, boxes, lvl, p) for lvl in range(student_pyramid.num_levels)]
    loss, alpha = sgfi_from_rois(student, teacher, sgfi)
    return (loss, alpha.data) if return_weights else loss


# ---------------------------------------------------------------- mask baselines


@dataclass
class ImitationMask:
    levels: list[np.ndarray]  # binary (H_l, W_l)

    @property
    def num_positive(self) -> int:
        return int(sum(m.sum() for m in self.levels))


def make_masks(gt_boxes: Sequence[Box], pyramid_shapes: Sequence[tuple[int, int, int]], kind: str) -> ImitationMask:
    """``pyramid_shapes`` holds ``(H, W, stride)`` per level.

    ``gt_box`` marks every cell whose extent overlaps a ground-truth box,
    using the same rule on all levels.
    """
    if kind not in ("whole", "gt_box"):
        raise ValueError(f"unknown mask kind {kind!r}")
    levels = []
    for h, w, stride in pyramid_shapes:
        if kind == "whole":
            levels.append(np.ones((h, w)))
            continue
        m = np.zeros((h, w))
        for b in gt_boxes:
            c0, c1 = int(math.floor(b.x1 / stride)), int(math.ceil(b.x2 / stride))
            r0, r1 = int(math.floor(b.y1 / stride)), int(math.ceil(b.y2 / stride))
            m[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] = 1.0
        levels.append(m)
    return ImitationMask(levels)


def masked_imitation_loss(
    student_pyramid: FeaturePyramid,
    teacher_pyramid: FeaturePyramid,
    mask: ImitationMask,
    adap: AdaptationMap,
) -> Tensor:
    """``1 / (2 N_p) * sum I (f_adap(S) - T)^2`` with level-to-level matching."""
    if student_pyramid.num_levels != teacher_pyramid.num_levels or student_pyramid.sizes != teacher_pyramid.sizes:
        raise UnsupportedPairError("mask-based imitation needs level-aligned pyramids")
    n_p = mask.num_positive
    if n_p == 0:
        return Tensor(0.0)
    total = None
    for lvl in range(student_pyramid.num_levels):
        m = mask.levels[lvl].reshape(-1)
        if not m.any():
            continue
        diff = T.sub(adap(student_pyramid.levels[lvl], lvl), teacher_pyramid.levels[lvl].data)
        weights = np.repeat(m[:, None], diff.shape[1], axis=1)
        term = T.tsum(T.mul(T.mul(diff, diff), weights))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / (2 * n_p))
