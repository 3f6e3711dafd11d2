"""Synthetic scenes: one class-signature blob per object plus Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..geometry import Box, LabeledProposal, boxes_to_array, iou_matrix
from .config import SceneConfig

PLACEMENT_RETRIES = 100
MAX_MUTUAL_IOU = 0.3
SIGNATURE_SEED = 20240


@dataclass
class Scene:
    grid: np.ndarray  # (H, W, C_in)
    gts: list[LabeledProposal]
    seed: int
    image_id: int

    @property
    def boxes(self) -> np.ndarray:
        return boxes_to_array([g.box for g in self.gts])

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.gts], dtype=np.int64)


@lru_cache(maxsize=32)
def _signatures(num_classes: int, in_channels: int, similarity: float) -> np.ndarray:
    """Evenly spread unit vectors (simplex vertices when they fit) under a fixed rotation.

    ``similarity`` blends in a shared direction, raising every pairwise cosine.
    """
    rng = np.random.default_rng(SIGNATURE_SEED)
    if num_classes <= in_channels + 1:
        eye = np.eye(num_classes) - 1.0 / num_classes
        u, _, _ = np.linalg.svd(eye)
        own = eye @ u[:, : num_classes - 1]
        own = np.pad(own, ((0, 0), (0, in_channels - own.shape[1])))
    else:
        own = rng.normal(size=(num_classes, in_channels))
    rot, _ = np.linalg.qr(rng.normal(size=(in_channels, in_channels)))
    own = own @ rot
    own /= np.linalg.norm(own, axis=1, keepdims=True)
    shared = rng.normal(size=in_channels)
    shared /= np.linalg.norm(shared)
    sig = np.sqrt(1 - similarity) * own + np.sqrt(similarity) * shared
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    sig.setflags(write=False)
    return sig


def class_signatures(params: SceneConfig) -> np.ndarray:
    """Unit ``(C, C_in)`` channel signatures; row ``c - 1`` belongs to label ``c``.

    With ``signal_channels`` set, signatures occupy only the leading channels.
    """
    k = params.signal_channels or params.in_channels
    sig = _signatures(params.num_classes, k, params.signature_similarity)
    return np.pad(sig, ((0, 0), (0, params.in_channels - k)))


def _bump(xs, ys, box: Box) -> np.ndarray:
    """Gaussian bump centred in the box (sigma a quarter of each side), zero outside."""
    cx, cy = 0.5 * (box.x1 + box.x2), 0.5 * (box.y1 + box.y2)
    gx = np.exp(-0.5 * ((xs - cx) / (box.width / 4)) ** 2) * ((xs >= box.x1) & (xs <= box.x2))
    gy = np.exp(-0.5 * ((ys - cy) / (box.height / 4)) ** 2) * ((ys >= box.y1) & (ys <= box.y2))
    return np.outer(gy, gx)


def _place_boxes(params: SceneConfig, n: int, rng: np.random.Generator) -> list[Box]:
    lo, hi = params.size_range
    boxes: list[Box] = []
    for _ in range(n):
        for _ in range(PLACEMENT_RETRIES):
            w, h = rng.uniform(lo, hi, size=2)
            x1 = rng.uniform(0, params.width - w)
            y1 = rng.uniform(0, params.height - h)
            cand = Box(x1, y1, x1 + w, y1 + h)
            if not boxes or iou_matrix(cand.as_array(), boxes_to_array(boxes)).max() < MAX_MUTUAL_IOU:
                boxes.append(cand)
                break
        else:
            raise RuntimeError(f"could not place {n} objects after {PLACEMENT_RETRIES} retries each")
    return boxes


def generate_scene(params: SceneConfig, seed: int, image_id: int | None = None) -> Scene:
    """Deterministic in ``(params, seed)``.

    Each object adds ``amplitude * signature * bump(x, y)``.  Clutter blobs
    are unlabelled bumps with random directions in the channels not used by
    the signatures (all channels when signatures use every channel).
    """
    rng = np.random.default_rng(seed)
    sig = class_signatures(params)
    n = int(rng.integers(params.min_objects, params.max_objects + 1))
    boxes = _place_boxes(params, n, rng)
    labels = rng.integers(1, params.num_classes + 1, size=n)
    amps = rng.uniform(*params.amplitude_range, size=n)
    ys = np.arange(params.height) + 0.5
    xs = np.arange(params.width) + 0.5
    grid = np.zeros((params.height, params.width, params.in_channels))
    img = seed if image_id is None else image_id
    gts = []
    for k, (box, label, amp) in enumerate(zip(boxes, labels, amps)):
        grid += amp * _bump(xs, ys, box)[:, :, None] * sig[label - 1][None, None, :]
        gts.append(LabeledProposal(box=box, label=int(label), image_id=img, gt_index=k))
    lo_ch = params.signal_channels if params.signal_channels and params.signal_channels < params.in_channels else 0
    lo, hi = params.size_range
    for _ in range(params.clutter_blobs):
        w, h = rng.uniform(lo, hi, size=2)
        x1, y1 = rng.uniform(0, params.width - w), rng.uniform(0, params.height - h)
        direction = np.zeros(params.in_channels)
        direction[lo_ch:] = rng.normal(size=params.in_channels - lo_ch)
        direction *= params.clutter_amplitude / np.linalg.norm(direction)
        grid += _bump(xs, ys, Box(x1, y1, x1 + w, y1 + h))[:, :, None] * direction[None, None, :]
    if params.noise_sigma > 0:
        grid = grid + rng.normal(0.0, params.noise_sigma, size=grid.shape)
    return Scene(grid, gts, seed, img)


def scene_seed(base: int, split: str, index: int) -> int:
    """Stable per-scene seed derived from the config seed, split and index."""
    tag = {"train": 0, "eval": 1, "analysis": 2}[split]
    return int(np.random.SeedSequence([base, tag, index]).generate_state(1)[0])


def make_scenes(params: SceneConfig, split: str, count: int) -> list[Scene]:
    offset = {"train": 0, "eval": 1_000_000, "analysis": 2_000_000}[split]
    return [generate_scene(params, scene_seed(params.seed, split, i), offset + i) for i in range(count)]
