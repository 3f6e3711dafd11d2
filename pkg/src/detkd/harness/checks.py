"""Gradient and oracle suites shared by the CLI and the acceptance tests."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .. import tensor as T
from ..ckd import infonce_loss
from ..geometry import Box, LabeledProposal, assign_pyramid_level
from ..models import AdaptationMap, FeaturePyramid, ProjectionHead, roi_align_batch
from ..oracle import GradCheckReport, brute_force_infonce, gradcheck
from ..pred_kd import class_aware_reg_loss, cls_kd_loss, convert_dense_logits, naive_reg_kd
from ..sgfi import SgfiConfig, SgfiModule, make_masks, masked_imitation_loss, sgfi_loss
from ..tensor import Tensor

GRAD_TOLERANCE = 1e-4
GRAD_STEP = 1e-5
ORACLE_TOLERANCE = 1e-9


def _check(label: str, loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> GradCheckReport:
    loss = loss_fn()
    grads = T.backward(loss, list(params.values()))
    analytic = dict(zip(params, grads))
    return gradcheck(loss_fn, params, analytic, h=GRAD_STEP, tolerance=GRAD_TOLERANCE, label=label)


def random_pyramid(rng, channels: int, sizes=((8, 8), (4, 4), (2, 2)), base_stride: int = 4, offset: int = 0):
    levels = [Tensor(rng.normal(size=(h * w, channels)), requires_grad=True) for h, w in sizes]
    strides = [base_stride * 2 ** (offset + i) for i in range(len(sizes))]
    return FeaturePyramid(levels, list(sizes), strides, offset)


def _proposals(rng, n: int, extent: float, num_levels: int) -> list[LabeledProposal]:
    out = []
    for k in range(n):
        w, h = rng.uniform(5, extent / 2, size=2)
        x1, y1 = rng.uniform(0, extent - w), rng.uniform(0, extent - h)
        box = Box(x1, y1, x1 + w, y1 + h)
        out.append(LabeledProposal(box, 1 + k % 3, 0, k, assign_pyramid_level(box, num_levels)))
    return out


def _pyramid_params(pyr: FeaturePyramid, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{i}": lvl for i, lvl in enumerate(pyr.levels)}


def gradient_suite(seed: int) -> list[GradCheckReport]:
    """Central-difference checks of every distillation loss at small random sizes."""
    rng = np.random.default_rng(seed)
    reports = []

    # semantic-guided imitation: adaptation, embedding, temperature and student features
    s_pyr = random_pyramid(rng, 3)
    t_pyr = random_pyramid(rng, 4)
    for lvl in t_pyr.levels:
        lvl.requires_grad = False
    sgfi = SgfiModule(3, 4, 3, SgfiConfig(tau_init=0.7, c_key=3, roi_size=4), rng)
    props = _proposals(rng, 3, 32.0, 3)
    params = {f"sgfi.{k}": v for k, v in sgfi.named_parameters().items()}
    params.update(_pyramid_params(s_pyr, "student"))
    reports.append(_check("sgfi", lambda: sgfi_loss(props, _fresh(s_pyr), t_pyr, sgfi), params))

    # contrastive loss: shared projection and student representations
    proj = ProjectionHead(5, 3, rng)
    r_s = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    r_t = rng.normal(size=(4, 5))
    negs = [rng.normal(size=(int(k), 5)) for k in rng.integers(0, 6, size=4)]

    def ckd_fn():
        return infonce_loss([(T.take(r_s, i), r_t[i], negs[i]) for i in range(4)], proj, 0.5)

    params = {f"proj.{k}": v for k, v in proj.named_parameters().items()}
    params["r_s"] = r_s
    reports.append(_check("ckd", ckd_fn, params))

    # classification KD through a softmax on student logits
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    p_t = _softmax(rng.normal(size=(5, 4)))
    reports.append(_check("cls_kd", lambda: cls_kd_loss(p_t, T.softmax(logits, axis=1)), {"logits": logits}))

    # classification KD on converted dense logits
    dense = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    q_t = _softmax(rng.normal(size=(5, 4)))[:, 1:]
    reports.append(
        _check("cls_kd_dense", lambda: cls_kd_loss(q_t, convert_dense_logits(dense)), {"logits": dense})
    )

    # naive localisation KD; offsets kept away from the |x| kink
    reg_t = rng.normal(size=(6, 4))
    reg_s = Tensor(reg_t + _away_from_zero(rng, (6, 4)), requires_grad=True)
    reports.append(_check("reg_naive", lambda: naive_reg_kd(reg_t, reg_s), {"reg_s": reg_s}))

    # class-aware localisation KD
    p_fg = _softmax(rng.normal(size=(6, 4)))[:, 1:]
    reg_t3 = rng.normal(size=(6, 3, 4))
    base = rng.normal(size=(6, 3, 4))
    reg_s3 = Tensor(_shift_weighted(base, reg_t3, p_fg, rng), requires_grad=True)
    reports.append(_check("reg_class_aware", lambda: class_aware_reg_loss(p_fg, reg_t3, reg_s3), {"reg_s": reg_s3}))

    # mask-based imitation baselines
    s2 = random_pyramid(rng, 3)
    t2 = random_pyramid(rng, 4)
    for lvl in t2.levels:
        lvl.requires_grad = False
    adap = AdaptationMap(3, 4, 3, rng)
    shapes = [(h, w, st) for (h, w), st in zip(s2.sizes, s2.strides)]
    for kind in ("whole", "gt_box"):
        mask = make_masks([Box(3, 5, 17, 20)], shapes, kind)
        params = {f"adap.{k}": v for k, v in adap.named_parameters().items()}
        params.update(_pyramid_params(s2, "student"))
        reports.append(
            _check(f"mask_{kind}", lambda m=mask: masked_imitation_loss(_fresh(s2), t2, m, adap), params)
        )

    # RoI Align with respect to the pyramid features
    pyr = random_pyramid(rng, 2)
    boxes = np.array([[1.0, 2.0, 20.0, 13.0], [4.0, 4.0, 30.0, 31.0]])
    weights = rng.normal(size=(2, 4 * 4 * 2))

    def roi_fn():
        feats = roi_align_batch(_fresh(pyr), boxes, [0, 1], 4)
        return T.tsum(T.mul(feats, weights))

    reports.append(_check("roi_align", roi_fn, _pyramid_params(pyr, "pyr")))
    return reports


def _fresh(pyr: FeaturePyramid) -> FeaturePyramid:
    """Same level tensors, no cached concatenation (the cache would go stale under perturbation)."""
    return FeaturePyramid(pyr.levels, pyr.sizes, pyr.strides, pyr.level_offset)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-300) * margin, v)


def _shift_weighted(base, reg_t, p_fg, rng, margin: float = 0.05) -> np.ndarray:
    """Student regressions whose class-weighted deviation stays clear of zero."""
    reg_s = base.copy()
    weighted = np.einsum("nc,nck->nk", p_fg, reg_t - reg_s)
    small = np.abs(weighted) < margin
    if small.any():
        # push along the first class, whose weight is positive
        bump = np.where(small, margin * 2 * np.sign(weighted + 1e-300), 0.0) / p_fg[:, :1]
        reg_s[:, 0, :] -= bump
    return reg_s


def oracle_suite(seed: int, instances: int = 100, max_n: int = 64, max_k: int = 256) -> list[float]:
    """Absolute differences between the engine's InfoNCE and the scalar oracle."""
    rng = np.random.default_rng(seed)
    diffs = []
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        d = int(rng.integers(2, 9))
        dp = int(rng.integers(2, 9))
        gamma = float(rng.uniform(0.05, 1.0))
        k = int(rng.integers(0, max_k + 1))
        proj = ProjectionHead(d, dp, rng)
        pairs = []
        for _ in range(n):
            k_i = int(rng.integers(0, k + 1))
            pairs.append((rng.normal(size=d), rng.normal(size=d), rng.normal(size=(k_i, d))))
        engine = float(infonce_loss(pairs, proj, gamma).data)
        ref = brute_force_infonce(pairs, proj.fc.weight.data, proj.fc.bias.data, gamma)
        diffs.append(abs(engine - ref))
    return diffs


def infonce_upper_bound(pairs) -> float:
    return max((math.log(len(p[2]) + 1) for p in pairs), default=0.0)
