"""Toy feature-pyramid detectors and the auxiliary networks used for distillation.

Feature grids are stored flattened as ``(H * W, C)`` tensors (row-major over
positions), so every per-position map is a plain matmul and RoI Align is a
matmul with a constant bilinear-weight matrix over the concatenated pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import tensor as T
from .geometry import Box
from .tensor import Tensor


class UnsupportedPairError(ValueError):
    """Operation needs a homogeneous student/teacher pair."""


@dataclass
class ArchSpec:
    family: str = "two_stage"  # "two_stage" | "dense"
    in_channels: int = 4
    channels: int = 8
    hidden: int = 0  # >0 gives each backbone level a two-layer map
    num_levels: int = 4
    level_offset: int = 0
    base_stride: int = 4  # stride of global level 0
    head_dim: int = 16
    num_classes: int = 5
    roi_size: int = 4
    num_anchors: int = 2
    anchor_scales: tuple[float, ...] = (1.5, 3.0)

    def __post_init__(self):
        if self.family not in ("two_stage", "dense"):
            raise ValueError(f"unknown detector family {self.family!r}")
        if len(self.anchor_scales) != self.num_anchors:
            self.anchor_scales = tuple(1.5 * 2**a for a in range(self.num_anchors))

    def stride(self, level: int) -> int:
        return self.base_stride * 2 ** (self.level_offset + level)


class Module:
    """Collects parameters from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict and set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ValueError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            if name not in arrays:
                continue
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"{name}: shape {a.shape} != {p.shape}")
            p.data = a.copy()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0):
        self.weight = Tensor(rng.normal(0.0, math.sqrt(gain / n_in), size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, T.broadcast_to(self.bias, y.shape))


class LevelMap(Module):
    def __init__(self, n_in: int, n_out: int, hidden: int, rng: np.random.Generator):
        self.layers = [Linear(n_in, hidden, rng), Linear(hidden, n_out, rng)] if hidden else [Linear(n_in, n_out, rng)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.relu(layer(x))
        return x


# ---------------------------------------------------------------- pyramids


@dataclass
class FeaturePyramid:
    levels: list[Tensor]  # each (H_l * W_l, C)
    sizes: list[tuple[int, int]]
    strides: list[int]
    level_offset: int = 0
    _flat: Tensor | None = field(default=None, repr=False)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([h * w for h, w in self.sizes])])

    @property
    def flat(self) -> Tensor:
        if self._flat is None:
            self._flat = T.concat(self.levels, axis=0) if len(self.levels) > 1 else self.levels[0]
        return self._flat

    def grid(self, level: int) -> np.ndarray:
        h, w = self.sizes[level]
        return self.levels[level].data.reshape(h, w, -1)

    def global_level(self, level: int) -> int:
        return self.level_offset + level


def pool_array(grid: np.ndarray, k: int) -> np.ndarray:
    h, w, c = grid.shape
    return grid.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))


class ToyBackbone(Module):
    """Level l applies its own per-position map to the input average-pooled to stride(l)."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        self.spec = spec
        self.maps = [LevelMap(spec.in_channels, spec.channels, spec.hidden, rng) for _ in range(spec.num_levels)]

    def __call__(self, scene: np.ndarray) -> FeaturePyramid:
        spec = self.spec
        h, w, _ = scene.shape
        first = spec.stride(0)
        coarsest = spec.stride(spec.num_levels - 1)
        if h % coarsest or w % coarsest:
            raise ValueError(f"grid {h}x{w} not divisible by coarsest stride {coarsest}")
        x = pool_array(np.asarray(scene, dtype=np.float64), first)
        levels, sizes, strides = [], [], []
        for lvl, level_map in enumerate(self.maps):
            if lvl:
                x = pool_array(x, 2)
            hh, ww = x.shape[:2]
            levels.append(level_map(Tensor(x.reshape(-1, spec.in_channels))))
            sizes.append((hh, ww))
            strides.append(spec.stride(lvl))
        return FeaturePyramid(levels, sizes, strides, spec.level_offset)


def forward_pyramid(backbone: ToyBackbone, scene: np.ndarray) -> FeaturePyramid:
    return backbone(scene)


# ---------------------------------------------------------------- RoI Align


def bilinear_weights(
    boxes: np.ndarray, levels: np.ndarray, sizes, strides, roi_size: int
) -> np.ndarray:
    """Constant ``(N * P * P, total_positions)`` matrix realising RoI Align.

    Sample points sit at bin centres; point x maps to feature column
    ``x / stride - 0.5`` and is clamped to the grid.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = np.asarray(levels, dtype=np.int64).reshape(-1)
    n = len(boxes)
    p = roi_size
    offsets = np.concatenate([[0], np.cumsum([h * w for h, w in sizes])])
    shape = (n * p * p, int(offsets[-1]))
    if n == 0:
        return np.zeros(shape)
    if levels.min() < 0 or levels.max() >= len(sizes):
        raise ValueError(f"level out of range 0..{len(sizes) - 1}")
    hs = np.array([s[0] for s in sizes])[levels]
    ws = np.array([s[1] for s in sizes])[levels]
    st = np.array(strides, dtype=np.float64)[levels]
    base = offsets[levels]
    frac = (np.arange(p) + 0.5) / p
    xs = boxes[:, 0:1] + frac[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (n, p)
    ys = boxes[:, 1:2] + frac[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = np.clip(xs / st[:, None] - 0.5, 0, (ws - 1)[:, None])
    fy = np.clip(ys / st[:, None] - 0.5, 0, (hs - 1)[:, None])
    x0 = np.minimum(np.floor(fx), np.maximum(ws - 2, 0)[:, None]).astype(np.int64)
    y0 = np.minimum(np.floor(fy), np.maximum(hs - 2, 0)[:, None]).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    x1 = np.minimum(x0 + 1, (ws - 1)[:, None])
    y1 = np.minimum(y0 + 1, (hs - 1)[:, None])
    # rows ordered (roi, py, px)
    rows = np.arange(n * p * p).reshape(n, p, p)
    W = ws[:, None, None]
    b = base[:, None, None]
    r_idx, c_idx, vals = [], [], []
    for yy, wyy in ((y0, 1 - wy), (y1, wy)):
        for xx, wxx in ((x0, 1 - wx), (x1, wx)):
            cols = b + yy[:, :, None] * W + xx[:, None, :]
            r_idx.append(rows.ravel())
            c_idx.append(cols.ravel())
            vals.append((wyy[:, :, None] * wxx[:, None, :]).ravel())
    # corners coincide on clamped borders; the COO -> dense conversion sums duplicates
    coo = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))), shape=shape)
    return coo.toarray()


def roi_align_batch(pyramid: FeaturePyramid, boxes: np.ndarray, levels, roi_size: int) -> Tensor:
    """RoI features ``(N, P * P * C)`` laid out as (py, px, channel)."""
    levels = np.broadcast_to(np.asarray(levels, dtype=np.int64), (len(np.asarray(boxes).reshape(-1, 4)),))
    wmat = bilinear_weights(boxes, levels, pyramid.sizes, pyramid.strides, roi_size)
    feats = T.matmul(Tensor(wmat), pyramid.flat)
    return T.reshape(feats, (len(levels), roi_size * roi_size * pyramid.channels))


def roi_align(pyramid: FeaturePyramid, box: Box, level: int, roi_size: int) -> Tensor:
    if not 0 <= level < pyramid.num_levels:
        raise ValueError(f"level {level} out of range 0..{pyramid.num_levels - 1}")
    out = roi_align_batch(pyramid, box.as_array()[None], [level], roi_size)
    return T.reshape(out, (roi_size, roi_size, pyramid.channels))


# ---------------------------------------------------------------- box coding


def encode_deltas(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    tw, th = targets[:, 2] - targets[:, 0], targets[:, 3] - targets[:, 1]
    tx, ty = targets[:, 0] + 0.5 * tw, targets[:, 1] + 0.5 * th
    return np.stack([(tx - bx) / bw, (ty - by) / bh, np.log(tw / bw), np.log(th / bh)], axis=1)


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    cx, cy = bx + deltas[:, 0] * bw, by + deltas[:, 1] * bh
    w = bw * np.exp(np.clip(deltas[:, 2], -4, 4))
    h = bh * np.exp(np.clip(deltas[:, 3], -4, 4))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ---------------------------------------------------------------- heads


class TwoStageHead(Module):
    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        d_in = spec.roi_size * spec.roi_size * spec.channels
        self.fc1 = Linear(d_in, spec.head_dim, rng)
        self.fc2 = Linear(spec.head_dim, spec.head_dim, rng)
        self.cls = Linear(spec.head_dim, spec.num_classes + 1, rng, gain=1.0)
        self.reg = Linear(spec.head_dim, 4 * spec.num_classes, rng, gain=0.1)
        self.num_classes = spec.num_classes

    def __call__(self, roi_feats: Tensor) -> dict[str, Tensor]:
        r = T.relu(self.fc2(T.relu(self.fc1(roi_feats))))
        n = roi_feats.shape[0]
        return {
            "rep": r,
            "logits": self.cls(r),
            "reg": T.reshape(self.reg(r), (n, self.num_classes, 4)),
        }


class DenseHead(Module):
    """Per-position classification and localisation branches.

    The classification branch ends in an ``A * D`` feature whose anchor slices
    feed a shared ``D -> C + 1`` output layer, so each anchor's logits depend
    only on its own slice.
    """

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        a, d, c = spec.num_anchors, spec.head_dim, spec.channels
        self.cls1 = Linear(c, a * d, rng)
        self.cls2 = Linear(a * d, a * d, rng)
        self.cls_out = Linear(d, spec.num_classes + 1, rng, gain=1.0)
        self.reg1 = Linear(c, d, rng)
        self.reg2 = Linear(d, d, rng)
        self.reg_out = Linear(d, 4 * a, rng, gain=0.1)
        self.num_anchors = a
        self.head_dim = d
        self.num_classes = spec.num_classes

    def __call__(self, feats: Tensor) -> dict[str, Tensor]:
        n = feats.shape[0]
        a, d = self.num_anchors, self.head_dim
        cls_feat = T.relu(self.cls2(T.relu(self.cls1(feats))))
        logits = self.cls_out(T.reshape(cls_feat, (n * a, d)))
        reg = self.reg_out(T.relu(self.reg2(T.relu(self.reg1(feats)))))
        return {
            "cls_feat": cls_feat,
            "logits": T.reshape(logits, (n, a, self.num_classes + 1)),
            "reg": T.reshape(reg, (n, a, 4)),
        }


def decouple_anchor_rep(feature, anchor_index: int, num_anchors: int, dim: int):
    """Slice ``[i * D, (i + 1) * D)`` of a dense location's ``A * D`` feature."""
    if not 0 <= anchor_index < num_anchors:
        raise IndexError(f"anchor_index {anchor_index} out of range 0..{num_anchors - 1}")
    if feature.shape[-1] != num_anchors * dim:
        raise ValueError(f"feature width {feature.shape[-1]} != {num_anchors} * {dim}")
    sl = (Ellipsis, slice(anchor_index * dim, (anchor_index + 1) * dim))
    return T.take(feature, sl) if isinstance(feature, Tensor) else np.asarray(feature)[sl]


def decouple_batch(cls_feat: Tensor, positions: np.ndarray, anchors: np.ndarray, num_anchors: int) -> Tensor:
    """Gather one anchor slice per (position, anchor) pair from ``(P_total, A * D)``."""
    n_pos, width = cls_feat.shape
    grouped = T.reshape(cls_feat, (n_pos, num_anchors, width // num_anchors))
    return T.take(grouped, (np.asarray(positions), np.asarray(anchors)))


# ---------------------------------------------------------------- detectors


class TwoStageDetector(Module):
    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        if spec.family != "two_stage":
            raise ValueError("TwoStageDetector needs family='two_stage'")
        self.spec = spec
        self.backbone = ToyBackbone(spec, rng)
        self.head = TwoStageHead(spec, rng)
        self.frozen: set[str] = set()

    def rois(self, pyramid: FeaturePyramid, boxes: np.ndarray, levels) -> dict[str, Tensor]:
        feats = roi_align_batch(pyramid, boxes, levels, self.spec.roi_size)
        out = self.head(feats)
        out["roi_feats"] = feats
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k not in self.frozen}


def make_anchors(spec: ArchSpec, sizes: list[tuple[int, int]]) -> np.ndarray:
    """Square anchors ``(total_positions, A, 4)`` centred on every cell."""
    out = []
    for lvl, (h, w) in enumerate(sizes):
        s = spec.stride(lvl)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * s, (np.arange(w) + 0.5) * s, indexing="ij")
        cx, cy = cx.ravel(), cy.ravel()
        level = []
        for scale in spec.anchor_scales:
            half = 0.5 * scale * s
            level.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
        out.append(np.stack(level, axis=1))
    return np.concatenate(out, axis=0)


class DenseDetector(Module):
    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        if spec.family != "dense":
            raise ValueError("DenseDetector needs family='dense'")
        self.spec = spec
        self.backbone = ToyBackbone(spec, rng)
        self.head = DenseHead(spec, rng)
        self.frozen: set[str] = set()
        self._anchor_cache: dict[tuple, np.ndarray] = {}

    def dense(self, pyramid: FeaturePyramid) -> dict[str, Tensor]:
        return self.head(pyramid.flat)

    def anchors(self, pyramid: FeaturePyramid) -> np.ndarray:
        key = tuple(pyramid.sizes)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = make_anchors(self.spec, pyramid.sizes)
        return self._anchor_cache[key]

    def level_of_position(self, pyramid: FeaturePyramid) -> np.ndarray:
        return np.concatenate([np.full(h * w, lvl) for lvl, (h, w) in enumerate(pyramid.sizes)])

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k not in self.frozen}


def build_detector(spec: ArchSpec, rng: np.random.Generator):
    return TwoStageDetector(spec, rng) if spec.family == "two_stage" else DenseDetector(spec, rng)


def transfer_head(teacher, student) -> None:
    """Copy the teacher's head into the student and freeze it."""
    if type(teacher.head) is not type(student.head):
        raise UnsupportedPairError("head transfer needs two detectors of the same family")
    src, dst = teacher.head.named_parameters(), student.head.named_parameters()
    if set(src) != set(dst) or any(src[k].shape != dst[k].shape for k in src):
        raise UnsupportedPairError("head transfer needs identical head shapes")
    for k, p in dst.items():
        p.data = src[k].data.copy()
    student.frozen |= {f"head.{k}" for k in dst}


# ---------------------------------------------------------------- distillation nets


class AdaptationMap(Module):
    """One per-position linear map C_student -> C_teacher per student level."""

    def __init__(self, c_student: int, c_teacher: int, num_levels: int, rng: np.random.Generator):
        self.maps = [Linear(c_student, c_teacher, rng, gain=1.0) for _ in range(num_levels)]
        self.c_student = c_student
        self.c_teacher = c_teacher

    def __call__(self, feats: Tensor, level: int) -> Tensor:
        """``feats`` is ``(..., C_student)`` rows; output keeps the leading layout."""
        shape = feats.shape
        rows = T.reshape(feats, (-1, self.c_student))
        out = self.maps[level](rows)
        return T.reshape(out, shape[:-1] + (self.c_teacher,))


class EmbedNet(Module):
    """Two (2x2 avg pool, per-position linear, ReLU) stages, then flatten."""

    def __init__(self, c_in: int, c_key: int, roi_size: int, rng: np.random.Generator):
        if roi_size % 4:
            raise ValueError("roi_size must be divisible by 4")
        self.stage1 = Linear(c_in, c_key, rng)
        self.stage2 = Linear(c_key, c_key, rng)
        self.c_in = c_in
        self.c_key = c_key
        self.roi_size = roi_size

    def __call__(self, roi_feats: Tensor) -> Tensor:
        """``(N, P * P * C)`` -> ``(N, (P/4)^2 * C_key)``."""
        n, p = roi_feats.shape[0], self.roi_size
        x = T.reshape(roi_feats, (n, p // 2, 2, p // 2, 2, self.c_in))
        x = T.reshape(T.mean(x, axis=(2, 4)), (-1, self.c_in))
        x = T.relu(self.stage1(x))
        q = p // 4
        x = T.reshape(x, (n, q, 2, q, 2, self.c_key))
        x = T.reshape(T.mean(x, axis=(2, 4)), (-1, self.c_key))
        x = T.relu(self.stage2(x))
        return T.reshape(x, (n, q * q * self.c_key))


class ProjectionHead(Module):
    """Linear ``D -> D_proj`` shared by student and teacher representations."""

    def __init__(self, dim: int, dim_proj: int, rng: np.random.Generator):
        self.fc = Linear(dim, dim_proj, rng, gain=1.0)

    def __call__(self, x) -> Tensor:
        return self.fc(T.as_tensor(x))
