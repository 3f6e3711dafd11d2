"""Boxes, proposal sampling, pyramid-level assignment and IoU-based filtering.

Labels follow the detector's ``C + 1`` layout: ``0`` is background and
foreground classes are ``1..C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BACKGROUND = 0
DEFAULT_BASE_SCALE = 8.0
DEFAULT_BASE_LEVEL = 0
NEGATIVE_RETRIES = 100


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self!r}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class LabeledProposal:
    box: Box
    label: int
    image_id: int
    gt_index: int | None = None
    assigned_level: int = 0
    # index into whatever list the proposal was drawn from (dense predictions)
    source: int | None = None

    def __post_init__(self):
        if (self.label == BACKGROUND) != (self.gt_index is None):
            raise ValueError("background proposals carry no gt_index and foreground ones must")

    @property
    def is_positive(self) -> bool:
        return self.label != BACKGROUND


@dataclass
class ProposalSample:
    proposals: list[LabeledProposal]
    # set when the negative quota could not be met within the retry budget
    short_negatives: bool = False


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays of xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def assign_pyramid_level(
    box: Box,
    num_levels: int,
    base_scale: float = DEFAULT_BASE_SCALE,
    base_level: int = DEFAULT_BASE_LEVEL,
) -> int:
    """FPN heuristic ``floor(k0 + log2(sqrt(area) / s0))`` clamped to the pyramid."""
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if box.area <= 0:
        raise ValueError("box area must be positive")
    k = math.floor(base_level + math.log2(math.sqrt(box.area) / base_scale))
    return int(min(max(k, 0), num_levels - 1))


def clip_box(xyxy, height: float, width: float, min_size: float = 1.0) -> Box | None:
    x1, y1, x2, y2 = (float(v) for v in xyxy)
    x1, x2 = max(0.0, x1), min(float(width), x2)
    y1, y2 = max(0.0, y1), min(float(height), y2)
    if x2 - x1 < min_size or y2 - y1 < min_size:
        return None
    return Box(x1, y1, x2, y2)


def _jitter(box: Box, scale: float, rng: np.random.Generator, height: float, width: float) -> Box | None:
    w, h = box.width, box.height
    d = rng.normal(0.0, scale, size=4) * np.array([w, h, w, h])
    return clip_box(box.as_array() + d, height, width)


def sample_proposals(
    gts: Sequence[LabeledProposal],
    n_total: int,
    pos_fraction: float,
    jitter_scale: float,
    seed: int | np.random.Generator,
    grid: tuple[int, int],
    num_levels: int = 4,
    size_range: tuple[float, float] = (8.0, 40.0),
) -> ProposalSample:
    """Toy RPN: jittered ground-truth copies as positives, random boxes as negatives.

    Positives keep IoU >= 0.5 with their source box (fall back to the exact gt
    after bounded retries).  Negatives have IoU < 0.5 with every ground truth.
    """
    if not gts:
        raise ValueError("need at least one ground truth")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    height, width = grid
    image_id = gts[0].image_id
    n_pos = int(round(n_total * pos_fraction))
    n_neg = n_total - n_pos
    props: list[LabeledProposal] = []
    for k in range(n_pos):
        gt = gts[k % len(gts)]
        box = gt.box
        if jitter_scale > 0:
            for _ in range(NEGATIVE_RETRIES):
                cand = _jitter(gt.box, jitter_scale, rng, height, width)
                if cand is not None and iou(cand, gt.box) >= 0.5:
                    box = cand
                    break
        props.append(
            LabeledProposal(
                box=box,
                label=gt.label,
                image_id=image_id,
                gt_index=gt.gt_index,
                assigned_level=assign_pyramid_level(box, num_levels),
            )
        )
    gt_arr = boxes_to_array([g.box for g in gts])
    lo, hi = size_range
    # candidates are drawn in rounds of n_neg; each box slot gets at most
    # NEGATIVE_RETRIES rounds, matching a per-box retry bound
    accepted: list[np.ndarray] = []
    for _ in range(NEGATIVE_RETRIES if n_neg else 0):
        need = n_neg - len(accepted)
        if need <= 0:
            break
        wh = rng.uniform(lo, hi, size=(n_neg, 2))
        xy = rng.uniform(0, 1, size=(n_neg, 2)) * (np.array([width, height]) - wh)
        cand = np.concatenate([xy, xy + wh], axis=1)
        ok = iou_matrix(cand, gt_arr).max(axis=1) < 0.5
        accepted.extend(cand[ok][:need])
    for row in accepted:
        box = Box(*row)
        props.append(
            LabeledProposal(
                box=box,
                label=BACKGROUND,
                image_id=image_id,
                assigned_level=assign_pyramid_level(box, num_levels),
            )
        )
    short = len(accepted) < n_neg
    return ProposalSample(props, short_negatives=short)


def extract_rois_from_dense(
    pred_boxes: Sequence[Box | None],
    gts: Sequence[LabeledProposal],
    iou_threshold: float = 0.5,
    neg_ratio: int = 3,
    seed: int | np.random.Generator = 0,
    num_levels: int = 4,
) -> list[LabeledProposal]:
    """Label a dense detector's predicted boxes against ground truth and sample 1:neg_ratio.

    ``None`` entries (boxes that decoded to nothing) are skipped; each returned
    proposal records the index of its prediction in ``source``.
    """
    valid = [(i, b) for i, b in enumerate(pred_boxes) if b is not None]
    if not valid or not gts:
        return []
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    image_id = gts[0].image_id
    ious = iou_matrix(boxes_to_array([b for _, b in valid]), boxes_to_array([g.box for g in gts]))
    best = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    pos, neg = [], []
    for row, (src, box) in enumerate(valid):
        level = assign_pyramid_level(box, num_levels)
        if best_iou[row] >= iou_threshold:
            gt = gts[best[row]]
            pos.append(LabeledProposal(box, gt.label, image_id, gt.gt_index, level, src))
        else:
            neg.append(LabeledProposal(box, BACKGROUND, image_id, None, level, src))
    n_neg = min(len(neg), neg_ratio * len(pos))
    if n_neg < len(neg):
        keep = np.sort(rng.choice(len(neg), size=n_neg, replace=False))
        neg = [neg[k] for k in keep]
    return pos + neg


def filter_negative_candidates(
    anchor: LabeledProposal,
    candidates: Sequence[LabeledProposal],
    iou_threshold: float = 0.5,
) -> list[LabeledProposal]:
    """Drop same-image candidates overlapping the anchor by more than the threshold.

    Exact duplicates (IoU == 1) are dropped even at ``iou_threshold=1.0``.
    Candidates from other images always pass.
    """
    keep = []
    for c in candidates:
        if c.image_id == anchor.image_id:
            o = iou(anchor.box, c.box)
            if o > iou_threshold or o >= 1.0:
                continue
        keep.append(c)
    return keep
