"""Post-training diagnostics: level-matching histogram, logit correlations, MI bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..ckd import infonce_masked, mi_lower_bound
from ..geometry import iou_matrix
from ..models import ProjectionHead, TwoStageDetector
from ..optim import OptimizerState, sgd_step
from ..oracle import gaussian_mi_true
from ..sgfi import SgfiModule, sgfi_loss
from ..tensor import Tensor
from .config import ExperimentConfig
from .data import Scene


@dataclass
class MatchHistogram:
    deltas: np.ndarray  # support, ascending
    counts: np.ndarray
    index_mode: str = "local"

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def mode(self) -> int:
        return int(self.deltas[int(np.argmax(self.counts))])

    def mass_within(self, radius: int) -> float:
        if self.total == 0:
            return 0.0
        return float(self.counts[np.abs(self.deltas) <= radius].sum() / self.total)

    def as_dict(self) -> dict:
        return {int(d): int(c) for d, c in zip(self.deltas, self.counts)}


def match_level_histogram(
    student_pyramids,
    teacher_pyramids,
    sgfi: SgfiModule,
    proposals,
    index_mode: str = "local",
) -> MatchHistogram:
    """Counts of ``argmax_l alpha^l - teacher level`` over positive proposals.

    ``student_pyramids`` / ``teacher_pyramids`` are per-scene pyramids and
    ``proposals`` per-scene lists of proposals (only positives are used).
    ``index_mode="local"`` compares positions within each pyramid; ``"global"``
    adds each pyramid's level offset first.
    """
    if index_mode not in ("local", "global"):
        raise ValueError(f"unknown index_mode {index_mode!r}")
    diffs = []
    s_levels = t_levels = None
    s_off = t_off = 0
    for s_pyr, t_pyr, props in zip(student_pyramids, teacher_pyramids, proposals):
        pos = [p for p in props if p.is_positive]
        s_levels, t_levels = s_pyr.num_levels, t_pyr.num_levels
        if index_mode == "global":
            s_off, t_off = s_pyr.level_offset, t_pyr.level_offset
        if not pos:
            continue
        _, alpha = sgfi_loss(pos, s_pyr, t_pyr, sgfi, return_weights=True)
        best = alpha.argmax(axis=1) + s_off
        teacher = np.array([p.assigned_level for p in pos]) + t_off
        diffs.append(best - teacher)
    if s_levels is None or not diffs:
        raise ValueError("no positive proposals to histogram")
    diffs = np.concatenate(diffs)
    lo = s_off - (t_off + t_levels - 1)
    hi = s_off + s_levels - 1 - t_off
    support = np.arange(lo, hi + 1)
    counts = np.array([(diffs == d).sum() for d in support], dtype=np.int64)
    return MatchHistogram(support, counts, index_mode)


def match_experiment(cfg: ExperimentConfig, teacher, seed: int) -> dict:
    """Train SGFI for ``analysis.sgfi_steps`` steps, then histogram the level matches.

    With ``analysis.copy_teacher`` the student is a frozen copy of the teacher and only
    the SGFI modules learn.  Otherwise the student trains normally with SGFI
    enabled.  Positive proposals come from the analysis split.
    """
    from .config import with_overrides
    from .data import make_scenes
    from .train import Distiller, draw_proposals

    copy_teacher = cfg.analysis.copy_teacher
    optim = cfg.optim.model_copy(update={"steps": cfg.analysis.sgfi_steps})
    run_cfg = with_overrides(cfg, methods=("sgfi",), optim=optim.model_dump())
    d = Distiller(run_cfg, teacher, seed)
    if copy_teacher:
        d.student.load_arrays({k: v.data for k, v in teacher.named_parameters().items()})
        d.student.frozen = set(d.student.named_parameters())
    result = d.train()
    scenes = make_scenes(cfg.scenes, "analysis", cfg.analysis.num_scenes)
    s_pyrs, t_pyrs, props = [], [], []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, 8, i])
        p = draw_proposals(scene, cfg, rng, n_total=cfg.proposals.eval_per_scene, pos_fraction=1.0)
        s_pyrs.append(d.student.backbone(scene.grid))
        t_pyrs.append(teacher.backbone(scene.grid))
        props.append(p.items)
    hist = match_level_histogram(s_pyrs, t_pyrs, d.sgfi, props, cfg.analysis.index_mode)
    return {"histogram": hist, "losses": result.losses, "tau": float(np.exp(d.sgfi.log_tau.data))}


def write_hist_csv(path, hist: MatchHistogram) -> None:
    lines = ["delta,count"] + [f"{int(d)},{int(c)}" for d, c in zip(hist.deltas, hist.counts)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- logit correlations


def correlation_matrix(logits: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pearson correlation between columns; zero-variance columns give 0 entries.

    Returns the matrix and whether any column had zero variance.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two rows to correlate")
    xc = x - x.mean(axis=0)
    sd = np.sqrt((xc**2).sum(axis=0))
    flat = sd <= 1e-12
    safe = np.where(flat, 1.0, sd)
    corr = (xc.T @ xc) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    return corr, bool(flat.any())


def logits_correlation_diff(student_logits: np.ndarray, teacher_logits: np.ndarray) -> dict:
    """Difference of the two logit correlation matrices and its Frobenius norm."""
    cs, flag_s = correlation_matrix(student_logits)
    ct, flag_t = correlation_matrix(teacher_logits)
    if cs.shape != ct.shape:
        raise ValueError(f"logit widths differ: {cs.shape} vs {ct.shape}")
    diff = cs - ct
    return {"norm": float(np.linalg.norm(diff)), "matrix": diff, "zero_variance": flag_s or flag_t}


def proposal_logits(det, pyramid, boxes: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """``(N, C + 1)`` logits for boxes; dense detectors use each box's best-IoU anchor."""
    if isinstance(det, TwoStageDetector):
        return det.rois(pyramid, boxes, levels)["logits"].data
    anchors = det.anchors(pyramid).reshape(-1, 4)
    best = iou_matrix(boxes, anchors).argmax(axis=1)
    logits = det.dense(pyramid)["logits"].data
    return logits.reshape(len(anchors), -1)[best]


def correlation_report(student, teacher, scenes: list[Scene], cfg: ExperimentConfig) -> dict:
    """Correlation difference over the foreground logits of positive eval proposals."""
    from .train import eval_proposals

    s_rows, t_rows = [], []
    for scene, props in zip(scenes, eval_proposals(scenes, cfg)):
        pos = props.positive
        boxes, levels = props.boxes[pos], props.levels[pos]
        s_rows.append(proposal_logits(student, student.backbone(scene.grid), boxes, levels))
        t_rows.append(proposal_logits(teacher, teacher.backbone(scene.grid), boxes, levels))
    s = np.concatenate(s_rows)[:, 1:]
    t = np.concatenate(t_rows)[:, 1:]
    return logits_correlation_diff(s, t)


def write_corr_csv(path, matrix: np.ndarray) -> None:
    lines = ["row,col,value"]
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            lines.append(f"{i},{j},{float(matrix[i, j])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- MI lower bound


def correlated_gaussians(rng: np.random.Generator, n: int, rho: float, dim: int) -> tuple[np.ndarray, np.ndarray]:
    x = rng.normal(size=(n, dim))
    y = rho * x + np.sqrt(1.0 - rho * rho) * rng.normal(size=(n, dim))
    return x, y


def _bank_loss(proj, x, y, negatives, gamma) -> Tensor:
    n, k = len(x), len(negatives)
    bank = np.concatenate([y, negatives])
    mask = np.zeros((n, n + k), dtype=bool)
    mask[:, n:] = True
    return infonce_masked(Tensor(x), bank, np.arange(n), mask, proj, gamma)


def mi_bound_experiment(
    rho: float,
    dim: int,
    k_list,
    steps: int,
    seed: int,
    batch: int = 64,
    lr0: float = 0.05,
    gamma: float = 0.2,
    eval_batches: int = 20,
    dim_proj: int | None = None,
) -> dict:
    """Train a projection head by InfoNCE on correlated Gaussian pairs for each K.

    Every step draws a fresh batch of pairs and a fresh bank of K independent
    teacher-side samples shared by all anchors.  The bound ``log K - loss`` is
    measured on fresh samples after training.
    """
    if abs(rho) >= 1:
        raise ValueError("|rho| must be < 1")
    true_mi = gaussian_mi_true(rho, dim)
    out = {"rho": rho, "dim": dim, "true_mi": true_mi, "seed": seed, "per_k": {}}
    for k in k_list:
        rng = np.random.default_rng([seed, int(k)])
        proj = ProjectionHead(dim, dim_proj or dim, rng)
        params = proj.named_parameters()
        names = list(params)
        state = OptimizerState(steps, lr0, 0.0, 0.9, 0.0)
        curve = []
        for _ in range(steps):
            x, y = correlated_gaussians(rng, batch, rho, dim)
            negs = correlated_gaussians(rng, k, rho, dim)[1]
            loss = _bank_loss(proj, x, y, negs, gamma)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"InfoNCE diverged for K={k}")
            grads = T.backward(loss, [params[n] for n in names])
            sgd_step(params, dict(zip(names, grads)), state)
            curve.append(value)
        evals = []
        for _ in range(eval_batches):
            x, y = correlated_gaussians(rng, batch, rho, dim)
            negs = correlated_gaussians(rng, k, rho, dim)[1]
            evals.append(float(_bank_loss(proj, x, y, negs, gamma).data))
        final = float(np.mean(evals))
        out["per_k"][int(k)] = {"loss": final, "bound": mi_lower_bound(final, int(k)), "curve": curve}
    return out
