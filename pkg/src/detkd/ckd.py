"""Contrastive distillation: critic, memory queue, negative assembly and InfoNCE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import iou_matrix
from .models import ProjectionHead
from .tensor import Tensor

# reference size of the full-scale queue; desk runs default to far fewer
FULL_SCALE_QUEUE_SIZE = 1024 * 80


@dataclass
class CkdConfig:
    gamma: float = 0.2
    num_negatives: int = 256
    queue_size: int = 1024
    iou_threshold: float = 0.5
    dim_proj: int = 8
    filter_queue: bool = True

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be >= 0")


@dataclass(frozen=True)
class QueueEntry:
    rep: np.ndarray
    image_id: int
    box: tuple[float, float, float, float]


class MemoryQueue:
    """Bounded FIFO of detached teacher representations; oldest entries leave first.

    Storage is a set of parallel arrays trimmed to the newest ``capacity`` rows.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._reps: np.ndarray | None = None
        self._ids = np.zeros(0, dtype=np.int64)
        self._boxes = np.zeros((0, 4))

    def __len__(self) -> int:
        return len(self._ids)

    def enqueue(self, reps, image_ids, boxes) -> None:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        reps = np.array(reps.data if isinstance(reps, Tensor) else reps, dtype=np.float64, copy=True)
        if not len(boxes):
            return
        reps = reps.reshape(len(boxes), -1)
        ids = np.asarray(image_ids, dtype=np.int64).reshape(-1)
        if len(ids) != len(boxes):
            raise ValueError("reps, image_ids and boxes must have the same length")
        if self._reps is None:
            self._reps = np.zeros((0, reps.shape[1]))
        elif reps.shape[1] != self._reps.shape[1]:
            raise ValueError(f"representation width {reps.shape[1]} != queue width {self._reps.shape[1]}")
        if self.capacity == 0:
            return
        keep = -self.capacity
        self._reps = np.concatenate([self._reps, reps])[keep:]
        self._ids = np.concatenate([self._ids, ids])[keep:]
        self._boxes = np.concatenate([self._boxes, boxes])[keep:]

    def entries(self) -> list[QueueEntry]:
        if self._reps is None:
            return []
        return [
            QueueEntry(r.copy(), int(i), tuple(float(v) for v in b))
            for r, i, b in zip(self._reps, self._ids, self._boxes)
        ]

    def arrays(self, dim: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._reps is None or not len(self._ids):
            d = (0 if self._reps is None else self._reps.shape[1]) if dim is None else dim
            return np.zeros((0, d)), np.zeros(0, dtype=np.int64), np.zeros((0, 4))
        return self._reps.copy(), self._ids.copy(), self._boxes.copy()


def critic(r_s, r_t, proj: ProjectionHead, gamma: float) -> Tensor:
    """``exp(cos(f(r_s), f(r_t)) / gamma)`` for a single pair of vectors."""
    zs = proj(T.reshape(T.as_tensor(r_s), (1, -1)))
    zt = proj(T.reshape(T.as_tensor(r_t), (1, -1)))
    cos = T.cosine_similarity(zs, zt)
    return T.reshape(T.exp(T.scale(cos, 1.0 / gamma)), ())


def _overlap_blocked(ids, boxes, cand_ids, cand_boxes, iou_threshold: float) -> np.ndarray:
    """Same-image pairs overlapping above the threshold, or identical boxes."""
    same = np.asarray(ids)[:, None] == np.asarray(cand_ids)[None, :]
    ov = iou_matrix(boxes, cand_boxes)
    return same & ((ov > iou_threshold) | (ov >= 1.0))


def _subsample(cols: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if len(cols) <= k:
        return cols
    return np.sort(rng.choice(cols, size=k, replace=False))


def _subsample_rows(admit: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Keep at most ``k`` admitted columns per row, uniformly at random."""
    counts = admit.sum(axis=1)
    if (counts <= k).all():
        return admit
    keys = np.where(admit, rng.random(admit.shape), np.inf)
    order = np.argpartition(keys, k - 1, axis=1)[:, :k] if k > 0 else np.zeros((len(admit), 0), dtype=np.int64)
    out = np.zeros_like(admit)
    np.put_along_axis(out, order, True, axis=1)
    return out & admit


def negative_mask(
    image_ids: np.ndarray,
    boxes: np.ndarray,
    queue_ids: np.ndarray,
    queue_boxes: np.ndarray,
    iou_threshold: float,
    num_negatives: int,
    rng: np.random.Generator,
    filter_queue: bool = True,
) -> np.ndarray:
    """Boolean ``(N, N + Q)`` mask of admitted negatives per anchor.

    Columns are the batch's own teacher representations followed by the queue.
    The diagonal (each anchor's positive) is never admitted; same-image
    candidates with IoU above the threshold (or identical boxes) are dropped;
    rows with more than ``num_negatives`` survivors are subsampled.
    """
    image_ids = np.asarray(image_ids)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(image_ids)
    cand_ids = np.concatenate([image_ids, np.asarray(queue_ids, dtype=image_ids.dtype)])
    cand_boxes = np.concatenate([boxes, np.asarray(queue_boxes, dtype=np.float64).reshape(-1, 4)])
    blocked = _overlap_blocked(image_ids, boxes, cand_ids, cand_boxes, iou_threshold)
    if not filter_queue:
        blocked[:, n:] = False
    blocked[np.arange(n), np.arange(n)] = True
    return _subsample_rows(~blocked, num_negatives, rng)


def gather_negatives(
    anchor_index: int,
    batch_reps: np.ndarray,
    batch_image_ids,
    batch_boxes,
    queue: MemoryQueue,
    config: CkdConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Teacher representations serving as negatives for one anchor, ``(k, D)``."""
    batch_reps = np.asarray(batch_reps, dtype=np.float64)
    ids = np.asarray(batch_image_ids)
    boxes = np.asarray(batch_boxes, dtype=np.float64).reshape(-1, 4)
    q_reps, q_ids, q_boxes = queue.arrays(batch_reps.shape[1])
    others = np.delete(np.arange(len(ids)), anchor_index)
    cand_ids = np.concatenate([ids[others], q_ids.astype(ids.dtype)])
    cand_boxes = np.concatenate([boxes[others], q_boxes])
    blocked = _overlap_blocked(ids[anchor_index : anchor_index + 1], boxes[anchor_index], cand_ids, cand_boxes, config.iou_threshold)[0]
    if not config.filter_queue:
        blocked[len(others) :] = False
    cols = _subsample(np.flatnonzero(~blocked), config.num_negatives, rng)
    bank = np.concatenate([batch_reps[others], q_reps.reshape(-1, batch_reps.shape[1])])
    return bank[cols]


def infonce_masked(
    r_s: Tensor,
    bank: np.ndarray,
    positive: np.ndarray,
    neg_mask: np.ndarray,
    proj: ProjectionHead,
    gamma: float,
) -> Tensor:
    """Mean over anchors of ``-log(g_pos / (g_pos + sum_neg g))``.

    ``bank`` is ``(M, D)`` of detached teacher representations, ``positive``
    gives each anchor's column and ``neg_mask`` ``(N, M)`` its negatives.
    """
    n = r_s.shape[0]
    if n == 0:
        return Tensor(0.0)
    zs = T.normalize_rows(proj(r_s))
    zb = T.normalize_rows(proj(Tensor(bank)))
    logits = T.scale(T.matmul(zs, T.transpose(zb)), 1.0 / gamma)
    admit = np.array(neg_mask, dtype=bool, copy=True)
    admit[np.arange(n), positive] = True
    # constant per-row shift; cancels exactly in the ratio
    shift = np.where(admit, logits.data, -np.inf).max(axis=1)
    shifted = T.sub(logits, np.repeat(shift[:, None], logits.shape[1], axis=1))
    denom = T.tsum(T.mul(T.exp(shifted), admit.astype(np.float64)), axis=1)
    pos = T.take(shifted, (np.arange(n), np.asarray(positive)))
    return T.mean(T.sub(T.log(denom), pos))


def infonce_loss(pairs: Sequence[tuple], proj: ProjectionHead, gamma: float) -> Tensor:
    """InfoNCE over ``(r_s, r_t, negatives)`` triples.

    The positive term is part of the denominator, so an anchor without
    negatives contributes exactly 0.
    """
    if not pairs:
        return Tensor(0.0)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    r_s = T.stack([T.as_tensor(p[0]) for p in pairs], axis=0)
    dim = r_s.shape[1]
    blocks, positive, spans = [], [], []
    col = 0
    for _, r_t, negs in pairs:
        negs = np.asarray(negs, dtype=np.float64).reshape(-1, dim)
        blocks.append(np.asarray(r_t.data if isinstance(r_t, Tensor) else r_t, dtype=np.float64).reshape(1, dim))
        blocks.append(negs)
        positive.append(col)
        spans.append((col + 1, col + 1 + len(negs)))
        col += 1 + len(negs)
    bank = np.concatenate(blocks, axis=0)
    mask = np.zeros((len(pairs), col), dtype=bool)
    for i, (a, b) in enumerate(spans):
        mask[i, a:b] = True
    return infonce_masked(r_s, bank, np.array(positive), mask, proj, gamma)


def mi_lower_bound(loss_value: float, num_negatives: int) -> float:
    if num_negatives < 1:
        raise ValueError("need at least one negative")
    return math.log(num_negatives) - float(loss_value)
