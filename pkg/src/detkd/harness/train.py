"""Teacher pretraining and student distillation loops."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..ckd import CkdConfig, MemoryQueue, infonce_masked, negative_mask
from ..geometry import (
    BACKGROUND,
    LabeledProposal,
    boxes_to_array,
    clip_box,
    extract_rois_from_dense,
    iou_matrix,
    sample_proposals,
)
from ..models import (
    AdaptationMap,
    DenseDetector,
    FeaturePyramid,
    ProjectionHead,
    TwoStageDetector,
    build_detector,
    decode_deltas,
    decouple_batch,
    encode_deltas,
    transfer_head,
)
from ..optim import OptimizerState, sgd_step
from ..pred_kd import class_aware_reg_loss, cls_kd_loss, convert_dense_logits, gather_class, naive_reg_kd, total_loss
from ..sgfi import SgfiConfig, SgfiModule, make_masks, masked_imitation_loss, sgfi_loss
from ..tensor import Tensor
from .config import ExperimentConfig
from .data import Scene, make_scenes

REPORT_VERSION = 1
POS_IOU = 0.5
NEG_IOU = 0.4

# loss component logged for each method; head transfer adds no term
METHOD_COMPONENT = {
    "sgfi": "feat",
    "mask_whole": "feat",
    "mask_gt": "feat",
    "ckd": "ckd",
    "pred_cls": "cls",
    "pred_reg_naive": "reg",
    "pred_reg_ca": "reg",
}


class NumericalFailure(RuntimeError):
    """A loss became NaN or infinite."""


# ---------------------------------------------------------------- small pieces


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return Tensor(0.0)
    picked = T.take(T.log_softmax(logits, axis=1), (np.arange(n), labels))
    return T.scale(T.tsum(picked), -1.0 / n)


def detached(pyramid: FeaturePyramid) -> FeaturePyramid:
    return FeaturePyramid(
        [Tensor(lvl.data.copy()) for lvl in pyramid.levels], pyramid.sizes, pyramid.strides, pyramid.level_offset
    )


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericalFailure(f"{what} became non-finite at step {step}")


def worker_count() -> int:
    raw = os.environ.get("DETKD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DETKD_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class Proposals:
    boxes: np.ndarray
    labels: np.ndarray
    levels: np.ndarray
    gt_boxes: np.ndarray  # matched gt per proposal (zeros for background)
    items: list[LabeledProposal]

    @classmethod
    def from_list(cls, items: list[LabeledProposal], scene: Scene) -> "Proposals":
        gtb = scene.boxes
        matched = np.array([gtb[p.gt_index] if p.is_positive else np.zeros(4) for p in items]).reshape(-1, 4)
        return cls(
            boxes_to_array([p.box for p in items]),
            np.array([p.label for p in items], dtype=np.int64),
            np.array([p.assigned_level for p in items], dtype=np.int64),
            matched,
            items,
        )

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels != BACKGROUND)


def draw_proposals(scene: Scene, cfg: ExperimentConfig, rng, n_total=None, pos_fraction=None) -> Proposals:
    pc = cfg.proposals
    sample = sample_proposals(
        scene.gts,
        n_total or pc.per_scene,
        pos_fraction or pc.pos_fraction,
        pc.jitter,
        rng,
        (cfg.scenes.height, cfg.scenes.width),
        num_levels=cfg.teacher.num_levels,
        size_range=cfg.scenes.size_range,
    )
    return Proposals.from_list(sample.proposals, scene)


def two_stage_gt_loss(out: dict, props: Proposals) -> Tensor:
    loss = cross_entropy(out["logits"], props.labels)
    pos = props.positive
    if len(pos):
        reg = gather_class(T.take(out["reg"], pos), props.labels[pos])
        target = encode_deltas(props.boxes[pos], props.gt_boxes[pos])
        loss = T.add(loss, T.l1(reg, target))
    return loss


@dataclass
class AnchorTargets:
    labels: np.ndarray  # per flat anchor; -1 ignored, 0 background
    deltas: np.ndarray
    positive: np.ndarray
    gt_of: np.ndarray


def anchor_targets(anchors: np.ndarray, scene: Scene) -> AnchorTargets:
    """IoU >= 0.5 (or the best anchor of a gt) is positive, < 0.4 background."""
    flat = anchors.reshape(-1, 4)
    ious = iou_matrix(flat, scene.boxes)
    gt_of = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels = np.full(len(flat), -1, dtype=np.int64)
    labels[best < NEG_IOU] = BACKGROUND
    pos = best >= POS_IOU
    forced = ious.argmax(axis=0)
    pos[forced] = True
    gt_of[forced] = np.arange(len(scene.gts))
    labels[pos] = scene.labels[gt_of[pos]]
    positive = np.flatnonzero(pos)
    deltas = encode_deltas(flat[positive], scene.boxes[gt_of[positive]])
    return AnchorTargets(labels, deltas, positive, gt_of)


def dense_gt_loss(out: dict, targets: AnchorTargets, num_classes: int) -> Tensor:
    n = targets.labels.shape[0]
    logits = T.reshape(out["logits"], (n, num_classes + 1))
    valid = np.flatnonzero(targets.labels >= 0)
    loss = cross_entropy(T.take(logits, valid), targets.labels[valid])
    if len(targets.positive):
        reg = T.take(T.reshape(out["reg"], (n, 4)), targets.positive)
        loss = T.add(loss, T.l1(reg, targets.deltas))
    return loss


# ---------------------------------------------------------------- evaluation


def eval_proposals(scenes: list[Scene], cfg: ExperimentConfig) -> list[Proposals]:
    out = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([cfg.scenes.seed, 7, i])
        out.append(draw_proposals(scene, cfg, rng, n_total=cfg.proposals.eval_per_scene, pos_fraction=1.0))
    return out


def evaluate(det, scenes: list[Scene], cfg: ExperimentConfig, proposals: list[Proposals] | None = None) -> dict:
    """Positive-proposal classification accuracy and mean IoU of refined boxes."""
    correct, ious = [], []
    if isinstance(det, TwoStageDetector):
        proposals = proposals or eval_proposals(scenes, cfg)
        for scene, props in zip(scenes, proposals):
            pos = props.positive
            out = det.rois(det.backbone(scene.grid), props.boxes[pos], props.levels[pos])
            labels = props.labels[pos]
            correct.append(out["logits"].data.argmax(axis=1) == labels)
            deltas = out["reg"].data[np.arange(len(pos)), labels - 1]
            refined = decode_deltas(props.boxes[pos], deltas)
            ious.append(np.diag(iou_matrix(refined, props.gt_boxes[pos])))
    else:
        for scene in scenes:
            pyr = det.backbone(scene.grid)
            anchors = det.anchors(pyr).reshape(-1, 4)
            targets = anchor_targets(anchors, scene)
            out = det.dense(pyr)
            n = len(anchors)
            logits = out["logits"].data.reshape(n, -1)[targets.positive]
            correct.append(logits.argmax(axis=1) == targets.labels[targets.positive])
            refined = decode_deltas(anchors[targets.positive], out["reg"].data.reshape(n, 4)[targets.positive])
            ious.append(np.diag(iou_matrix(refined, scene.boxes[targets.gt_of[targets.positive]])))
    correct = np.concatenate(correct) if correct else np.zeros(0)
    ious = np.concatenate(ious) if ious else np.zeros(0)
    return {
        "accuracy": float(correct.mean()) if correct.size else 0.0,
        "refined_iou": float(ious.mean()) if ious.size else 0.0,
        "num_positive": int(correct.size),
    }


# ---------------------------------------------------------------- teacher


@dataclass
class TeacherResult:
    teacher: TwoStageDetector
    losses: list[float]
    metrics: dict


def new_teacher(cfg: ExperimentConfig, seed: int) -> TwoStageDetector:
    return build_detector(cfg.teacher.to_spec(), np.random.default_rng([seed, 1]))


def load_teacher(cfg: ExperimentConfig, arrays: dict[str, np.ndarray]) -> TwoStageDetector:
    teacher = new_teacher(cfg, 0)
    teacher.load_arrays(arrays)
    return teacher


def train_teacher(cfg: ExperimentConfig, seed: int | None = None) -> TeacherResult:
    """Ground-truth training (cross-entropy + L1 box refinement) on the train split."""
    seed = cfg.seeds[0] if seed is None else seed
    teacher = new_teacher(cfg, seed)
    scenes = make_scenes(cfg.scenes, "train", cfg.scenes.num_train)
    oc = cfg.teacher_optim
    state = OptimizerState(oc.steps, oc.lr0, oc.lr_min, oc.momentum, oc.weight_decay)
    rng = np.random.default_rng([seed, 2])
    params = teacher.trainable()
    names = list(params)
    losses = []
    for step in range(oc.steps):
        loss = Tensor(0.0)
        for _ in range(oc.scenes_per_step):
            scene = scenes[int(rng.integers(len(scenes)))]
            props = draw_proposals(scene, cfg, rng)
            out = teacher.rois(teacher.backbone(scene.grid), props.boxes, props.levels)
            loss = T.add(loss, T.scale(two_stage_gt_loss(out, props), 1.0 / oc.scenes_per_step))
        value = float(loss.data)
        _check_finite(value, step, "teacher loss")
        grads = T.backward(loss, [params[k] for k in names])
        sgd_step(params, dict(zip(names, grads)), state)
        losses.append(value)
    metrics = evaluate(teacher, make_scenes(cfg.scenes, "eval", cfg.scenes.num_eval), cfg)
    return TeacherResult(teacher, losses, metrics)


# ---------------------------------------------------------------- distillation


@dataclass
class RunResult:
    seed: int
    losses: dict[str, list[float]]
    metrics: dict
    extras: dict = field(default_factory=dict)


class Distiller:
    """Student plus the distillation modules for one seed."""

    def __init__(self, cfg: ExperimentConfig, teacher: TwoStageDetector, seed: int):
        self.cfg = cfg
        self.teacher = teacher
        self.seed = seed
        self.methods = set(cfg.methods)
        self.hetero = cfg.heterogeneous
        init = np.random.default_rng([seed, 3])
        self.student = build_detector(cfg.student.to_spec(), init)
        if "head_transfer" in self.methods:
            transfer_head(teacher, self.student)
        self.sgfi = None
        self.adap = None
        self.proj = None
        if "sgfi" in self.methods:
            sc = cfg.sgfi
            self.sgfi = SgfiModule(
                cfg.student.channels,
                cfg.teacher.channels,
                cfg.student.num_levels,
                SgfiConfig(sc.tau_init, sc.c_key, sc.roi_size, sc.positives_only),
                init,
            )
        if self.methods & {"mask_whole", "mask_gt"}:
            self.adap = AdaptationMap(cfg.student.channels, cfg.teacher.channels, cfg.student.num_levels, init)
        if "ckd" in self.methods:
            cc = cfg.ckd
            self.ckd_cfg = CkdConfig(cc.gamma, cc.num_negatives, cc.queue_size, cc.iou_threshold, cc.dim_proj, cc.filter_queue)
            self.proj = ProjectionHead(cfg.student.head_dim, cc.dim_proj, init)
            self.queue = MemoryQueue(cc.queue_size)
        self.rng = np.random.default_rng([seed, 4])
        self.scenes = make_scenes(cfg.scenes, "train", cfg.scenes.student_scenes)
        self.teacher_pyr = [detached(teacher.backbone(s.grid)) for s in self.scenes]
        self._targets: dict[int, AnchorTargets] = {}
        self._masks: dict[int, object] = {}

    def parameters(self) -> dict[str, Tensor]:
        params = {f"student.{k}": v for k, v in self.student.trainable().items()}
        for prefix, mod in (("sgfi", self.sgfi), ("adap", self.adap), ("proj", self.proj)):
            if mod is not None:
                params.update({f"{prefix}.{k}": v for k, v in mod.named_parameters().items()})
        return params

    def components(self) -> list[str]:
        comps = ["gt"] + sorted({METHOD_COMPONENT[m] for m in self.methods if m in METHOD_COMPONENT})
        if "pred_cls" in self.methods and self.hetero:
            comps = [("cls_dense" if c == "cls" else c) for c in comps]
        return comps

    # one scene's contribution; CKD pieces are returned for batching across scenes
    def _scene_parts(self, idx: int) -> tuple[dict, tuple | None]:
        scene = self.scenes[idx]
        t_pyr = self.teacher_pyr[idx]
        s_pyr = self.student.backbone(scene.grid)
        if self.hetero:
            return self._dense_parts(idx, scene, s_pyr, t_pyr)
        props = draw_proposals(scene, self.cfg, self.rng)
        out = self.student.rois(s_pyr, props.boxes, props.levels)
        parts = {"gt": two_stage_gt_loss(out, props)}
        need_teacher = self.methods & {"ckd", "pred_cls", "pred_reg_naive", "pred_reg_ca"}
        t_out = self.teacher.rois(t_pyr, props.boxes, props.levels) if need_teacher else None
        pos = props.positive
        if "sgfi" in self.methods:
            chosen = props.items if not self.cfg.sgfi.positives_only else [props.items[i] for i in pos]
            parts["feat"] = sgfi_loss(chosen, s_pyr, t_pyr, self.sgfi)
        if self.methods & {"mask_whole", "mask_gt"}:
            kind = "whole" if "mask_whole" in self.methods else "gt_box"
            if idx not in self._masks:
                shapes = [(h, w, st) for (h, w), st in zip(s_pyr.sizes, s_pyr.strides)]
                self._masks[idx] = make_masks([g.box for g in scene.gts], shapes, kind)
            parts["feat"] = masked_imitation_loss(s_pyr, t_pyr, self._masks[idx], self.adap)
        if "pred_cls" in self.methods:
            parts["cls"] = cls_kd_loss(softmax_np(t_out["logits"].data), T.softmax(out["logits"], axis=1))
        if len(pos) and self.methods & {"pred_reg_naive", "pred_reg_ca"}:
            reg_s = T.take(out["reg"], pos)
            reg_t = t_out["reg"].data[pos]
            if "pred_reg_naive" in self.methods:
                labels = props.labels[pos]
                parts["reg"] = naive_reg_kd(reg_t[np.arange(len(pos)), labels - 1], gather_class(reg_s, labels))
            else:
                p_fg = softmax_np(t_out["logits"].data[pos])[:, 1:]
                parts["reg"] = class_aware_reg_loss(p_fg, reg_t, reg_s)
        ckd = None
        if "ckd" in self.methods:
            ckd = (out["rep"], t_out["rep"].data, np.full(len(props.labels), scene.image_id), props.boxes)
        return parts, ckd

    def _dense_parts(self, idx, scene, s_pyr, t_pyr):
        student: DenseDetector = self.student
        anchors = student.anchors(s_pyr).reshape(-1, 4)
        if idx not in self._targets:
            self._targets[idx] = anchor_targets(anchors, scene)
        targets = self._targets[idx]
        out = student.dense(s_pyr)
        parts = {"gt": dense_gt_loss(out, targets, self.cfg.student.num_classes)}
        if not self.methods & {"sgfi", "ckd", "pred_cls"}:
            return parts, None
        rois = self._dense_rois(anchors, out["reg"].data.reshape(-1, 4), scene, targets)
        boxes = boxes_to_array([p.box for p in rois])
        levels = np.array([p.assigned_level for p in rois], dtype=np.int64)
        sources = np.array([p.source for p in rois], dtype=np.int64)
        positives = [p for p in rois if p.is_positive]
        if "sgfi" in self.methods:
            chosen = positives if self.cfg.sgfi.positives_only else rois
            parts["feat"] = sgfi_loss(chosen, s_pyr, t_pyr, self.sgfi)
        t_out = self.teacher.rois(t_pyr, boxes, levels)
        a = self.cfg.student.num_anchors
        if "pred_cls" in self.methods:
            n_pos = s_pyr.flat.shape[0]
            logits = T.reshape(out["logits"], (n_pos * a, self.cfg.student.num_classes + 1))
            p_s = convert_dense_logits(T.take(logits, sources))
            parts["cls_dense"] = cls_kd_loss(softmax_np(t_out["logits"].data)[:, 1:], p_s)
        ckd = None
        if "ckd" in self.methods:
            r_s = decouple_batch(out["cls_feat"], sources // a, sources % a, a)
            ckd = (r_s, t_out["rep"].data, np.full(len(rois), scene.image_id), boxes)
        return parts, ckd

    def _dense_rois(self, anchors, reg, scene, targets) -> list[LabeledProposal]:
        """Decoded predictions plus the ground truths, labelled and sampled 1:3.

        A ground-truth RoI borrows the representation of its best anchor.
        """
        h, w = self.cfg.scenes.height, self.cfg.scenes.width
        decoded = decode_deltas(anchors, reg)
        preds = [clip_box(b, h, w) for b in decoded] + [g.box for g in scene.gts]
        best_anchor = iou_matrix(anchors, scene.boxes).argmax(axis=0)
        rois = extract_rois_from_dense(
            preds, scene.gts, POS_IOU, 3, self.rng, num_levels=self.cfg.teacher.num_levels
        )
        n = len(anchors)
        fixed = []
        for p in rois:
            src = p.source if p.source < n else int(best_anchor[p.source - n])
            fixed.append(LabeledProposal(p.box, p.label, p.image_id, p.gt_index, p.assigned_level, src))
        return fixed

    def _ckd_loss(self, pieces: list[tuple]) -> Tensor:
        r_s = T.concat([p[0] for p in pieces], axis=0) if len(pieces) > 1 else pieces[0][0]
        r_t = np.concatenate([p[1] for p in pieces])
        ids = np.concatenate([p[2] for p in pieces])
        boxes = np.concatenate([p[3] for p in pieces])
        q_reps, q_ids, q_boxes = self.queue.arrays(r_t.shape[1])
        cc = self.ckd_cfg
        mask = negative_mask(ids, boxes, q_ids, q_boxes, cc.iou_threshold, cc.num_negatives, self.rng, cc.filter_queue)
        bank = np.concatenate([r_t, q_reps])
        loss = infonce_masked(r_s, bank, np.arange(len(ids)), mask, self.proj, cc.gamma)
        self.queue.enqueue(r_t, ids, boxes)
        return loss

    def step_loss(self) -> tuple[Tensor, dict[str, float]]:
        k = self.cfg.optim.scenes_per_step
        picks = self.rng.integers(len(self.scenes), size=k)
        sums: dict[str, Tensor] = {}
        pieces = []
        for idx in picks:
            parts, ckd = self._scene_parts(int(idx))
            for name, val in parts.items():
                val = T.scale(val, 1.0 / k)
                sums[name] = val if name not in sums else T.add(sums[name], val)
            if ckd is not None:
                pieces.append(ckd)
        if pieces:
            sums["ckd"] = self._ckd_loss(pieces)
        mode = "heterogeneous" if self.hetero else "homogeneous"
        total = total_loss(sums, mode, self.cfg.weights.model_dump())
        logged = {name: float(v.data) for name, v in sums.items()}
        return total, logged

    def train(self) -> RunResult:
        oc = self.cfg.optim
        state = OptimizerState(oc.steps, oc.lr0, oc.lr_min, oc.momentum, oc.weight_decay)
        params = self.parameters()
        names = list(params)
        comps = self.components()
        losses: dict[str, list[float]] = {c: [] for c in comps + ["total"]}
        for step in range(oc.steps):
            total, logged = self.step_loss()
            value = float(total.data)
            _check_finite(value, step, "total loss")
            grads = T.backward(total, [params[k] for k in names])
            sgd_step(params, dict(zip(names, grads)), state)
            for c in comps:
                losses[c].append(logged.get(c, 0.0))
            losses["total"].append(value)
        return RunResult(self.seed, losses, {})


def distill_seed(cfg: ExperimentConfig, teacher_arrays: dict[str, np.ndarray], seed: int) -> RunResult:
    from .analysis import correlation_report

    teacher = load_teacher(cfg, teacher_arrays)
    d = Distiller(cfg, teacher, seed)
    result = d.train()
    eval_scenes = make_scenes(cfg.scenes, "eval", cfg.scenes.num_eval)
    result.metrics = evaluate(d.student, eval_scenes, cfg)
    corr = correlation_report(d.student, teacher, eval_scenes, cfg)
    result.metrics["corr_diff_norm"] = corr["norm"]
    result.extras["corr_matrix"] = corr["matrix"]
    result.extras["distiller"] = d
    return result


def _distill_seed_worker(args):
    cfg, arrays, seed = args
    result = distill_seed(cfg, arrays, seed)
    result.extras.pop("distiller", None)
    return result


def distill(cfg: ExperimentConfig, teacher_arrays: dict[str, np.ndarray], keep_models: bool = False) -> list[RunResult]:
    """One run per seed in ``cfg.seeds``; parallel across seeds when DETKD_THREADS > 1."""
    jobs = [(cfg, teacher_arrays, s) for s in cfg.seeds]
    workers = min(worker_count(), len(jobs))
    if workers <= 1 or keep_models:
        results = [distill_seed(*job) for job in jobs]
        if not keep_models:
            for r in results:
                r.extras.pop("distiller", None)
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_distill_seed_worker, jobs))
