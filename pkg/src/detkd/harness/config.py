"""Experiment configuration schema (JSON on disk, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..models import ArchSpec

METHODS = ("sgfi", "ckd", "pred_cls", "pred_reg_naive", "pred_reg_ca", "head_transfer", "mask_whole", "mask_gt")
HOMOGENEOUS_ONLY = ("pred_reg_naive", "pred_reg_ca", "head_transfer", "mask_whole", "mask_gt")
FEATURE_METHODS = ("sgfi", "mask_whole", "mask_gt")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ArchConfig(_Strict):
    family: Literal["two_stage", "dense"] = "two_stage"
    in_channels: int = Field(4, ge=1)
    channels: int = Field(8, ge=1)
    hidden: int = Field(0, ge=0)
    num_levels: int = Field(4, ge=1)
    level_offset: int = Field(0, ge=0)
    base_stride: int = Field(4, ge=1)
    head_dim: int = Field(16, ge=1)
    num_classes: int = Field(5, ge=1)
    roi_size: int = Field(4, ge=4)
    num_anchors: int = Field(2, ge=1)
    anchor_scales: tuple[float, ...] = (1.5, 3.0)

    @model_validator(mode="after")
    def _anchors(self):
        if len(self.anchor_scales) != self.num_anchors:
            raise ValueError("anchor_scales needs one entry per anchor")
        if self.roi_size % 4:
            raise ValueError("roi_size must be a multiple of 4")
        return self

    def to_spec(self) -> ArchSpec:
        return ArchSpec(**self.model_dump())


class OptimConfig(_Strict):
    steps: int = Field(2000, ge=0)
    lr0: float = Field(0.003, gt=0)
    lr_min: float = Field(0.0, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    scenes_per_step: int = Field(1, ge=1)


class CkdSection(_Strict):
    gamma: float = Field(0.2, gt=0)
    num_negatives: int = Field(256, ge=0)
    queue_size: int = Field(1024, ge=0)
    iou_threshold: float = Field(0.5, ge=0, le=1)
    dim_proj: int = Field(8, ge=1)
    filter_queue: bool = True


class SgfiSection(_Strict):
    tau_init: float = Field(1.0, gt=0)
    c_key: int = Field(16, ge=1)
    # RoI grid used for imitation; independent of the detectors' own RoI size
    roi_size: int = Field(4, ge=4)
    positives_only: bool = True

    @field_validator("roi_size")
    @classmethod
    def _pool_twice(cls, v):
        if v % 4:
            raise ValueError("sgfi.roi_size must be a multiple of 4 (the embedding pools twice)")
        return v


class SceneConfig(_Strict):
    height: int = Field(64, ge=8)
    width: int = Field(64, ge=8)
    in_channels: int = Field(4, ge=1)
    num_classes: int = Field(5, ge=1)
    min_objects: int = Field(1, ge=1)
    max_objects: int = Field(3, ge=1)
    size_range: tuple[float, float] = (16.0, 40.0)
    noise_sigma: float = Field(0.5, ge=0)
    signature_similarity: float = Field(0.0, ge=0, lt=1)
    amplitude_range: tuple[float, float] = (0.7, 1.3)
    signal_channels: int | None = Field(None, ge=1)
    clutter_blobs: int = Field(0, ge=0)
    clutter_amplitude: float = Field(1.0, ge=0)
    num_train: int = Field(200, ge=1)
    num_student_train: int | None = Field(None, ge=1)
    num_eval: int = Field(50, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges(self):
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        lo, hi = self.size_range
        if not 1 <= lo <= hi <= min(self.height, self.width):
            raise ValueError("size_range must satisfy 1 <= lo <= hi <= grid size")
        if self.signal_channels is not None and self.signal_channels > self.in_channels:
            raise ValueError("signal_channels cannot exceed in_channels")
        if self.num_student_train is not None and self.num_student_train > self.num_train:
            raise ValueError("num_student_train cannot exceed num_train")
        return self

    @property
    def student_scenes(self) -> int:
        return self.num_train if self.num_student_train is None else self.num_student_train


class ProposalConfig(_Strict):
    per_scene: int = Field(64, ge=1)
    pos_fraction: float = Field(0.25, gt=0, le=1)
    jitter: float = Field(0.1, ge=0)
    eval_per_scene: int = Field(16, ge=1)


class AnalysisConfig(_Strict):
    sgfi_steps: int = Field(1000, ge=0)
    index_mode: Literal["local", "global"] = "local"
    num_scenes: int = Field(100, ge=1)
    # student starts as a frozen copy of the teacher; only the SGFI modules train
    copy_teacher: bool = False


class MiConfig(_Strict):
    rho: float = Field(0.8, gt=-1, lt=1)
    dim: int = Field(8, ge=1)
    k_list: tuple[int, ...] = (32, 128, 512)
    steps: int = Field(300, ge=1)
    batch: int = Field(64, ge=1)
    lr0: float = Field(0.05, gt=0)
    gamma: float = Field(0.2, gt=0)
    eval_batches: int = Field(20, ge=1)


class Weights(_Strict):
    gt: float = 1.0
    feat: float = 1.0
    ckd: float = 1.0
    cls: float = 1.0
    reg: float = 1.0
    cls_dense: float = 1.0


class ExperimentConfig(_Strict):
    methods: tuple[str, ...] = ()
    teacher: ArchConfig
    student: ArchConfig
    optim: OptimConfig = OptimConfig()
    teacher_optim: OptimConfig = OptimConfig()
    ckd: CkdSection = CkdSection()
    sgfi: SgfiSection = SgfiSection()
    scenes: SceneConfig = SceneConfig()
    proposals: ProposalConfig = ProposalConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    mi: MiConfig = MiConfig()
    weights: Weights = Weights()
    seeds: tuple[int, ...] = (0,)

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(v)) != len(v):
            raise ValueError("methods contain duplicates")
        return tuple(m for m in METHODS if m in v)

    @model_validator(mode="after")
    def _pairing(self):
        t, s = self.teacher, self.student
        if t.family != "two_stage":
            raise ValueError("teacher.family must be 'two_stage'")
        for arch, name in ((t, "teacher"), (s, "student")):
            if arch.in_channels != self.scenes.in_channels or arch.num_classes != self.scenes.num_classes:
                raise ValueError(f"{name} in_channels/num_classes must match scenes")
        if s.family == "two_stage" and s.roi_size != t.roi_size:
            raise ValueError("student.roi_size must equal teacher.roi_size for a two-stage pair")
        if self.heterogeneous:
            bad = [m for m in self.methods if m in HOMOGENEOUS_ONLY]
            if bad:
                raise ValueError(f"methods {bad} need a homogeneous pair")
        if sum(m in FEATURE_METHODS for m in self.methods) > 1:
            raise ValueError("choose at most one of sgfi, mask_whole, mask_gt")
        if "pred_reg_naive" in self.methods and "pred_reg_ca" in self.methods:
            raise ValueError("choose at most one of pred_reg_naive, pred_reg_ca")
        if any(m.startswith("mask_") for m in self.methods):
            if t.num_levels != s.num_levels or t.level_offset != s.level_offset or t.base_stride != s.base_stride:
                raise ValueError("mask imitation needs level-aligned pyramids")
        if "ckd" in self.methods and s.head_dim != t.head_dim:
            raise ValueError("ckd shares one projection, so student.head_dim must equal teacher.head_dim")
        if self.analysis.copy_teacher and s != t:
            raise ValueError("analysis.copy_teacher needs identical student and teacher architectures")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    @property
    def heterogeneous(self) -> bool:
        return self.student.family != self.teacher.family


def format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(format_errors(err)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(doc)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Re-validate ``cfg`` with top-level fields replaced."""
    doc = cfg.model_dump()
    doc.update({k: v for k, v in changes.items() if v is not None})
    return parse_config(doc)
