"""Independent reference computations used to check the tensor engine.

Nothing here touches :mod:`detkd.tensor` arithmetic: the InfoNCE reference
runs on plain Python floats, and the finite-difference driver only treats the
function under test as a black box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

GRAD_FLOOR = 1e-8


def _project(x: Sequence[float], weight: Sequence[Sequence[float]], bias: Sequence[float]) -> list[float]:
    out = []
    for k in range(len(bias)):
        acc = bias[k]
        for j in range(len(x)):
            acc += x[j] * weight[j][k]
        out.append(acc)
    return out


def _cosine(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / max(nu * nv, 1e-12)


def brute_force_infonce(pairs, weight, bias, gamma: float) -> float:
    """Reference InfoNCE with explicit loops.

    ``pairs`` holds ``(r_s, r_t, negatives)``; ``weight`` is ``D x D_proj`` and
    ``bias`` has length ``D_proj`` (the projection's parameters).
    """
    if not pairs:
        return 0.0
    w = [[float(v) for v in row] for row in np.asarray(weight)]
    b = [float(v) for v in np.asarray(bias)]
    total = 0.0
    for r_s, r_t, negs in pairs:
        zs = _project([float(v) for v in np.ravel(r_s)], w, b)
        zt = _project([float(v) for v in np.ravel(r_t)], w, b)
        scores = [_cosine(zs, zt) / gamma]
        for neg in np.asarray(negs, dtype=float).reshape(-1, np.size(r_t)):
            scores.append(_cosine(zs, _project(list(neg), w, b)) / gamma)
        top = max(scores)
        denom = sum(math.exp(s - top) for s in scores)
        total += -(scores[0] - top - math.log(denom))
    return total / len(pairs)


def finite_diff_grad(
    fn: Callable[[], float], params: Mapping[str, np.ndarray], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p + h) - f(p - h)) / 2h`` for every coordinate.

    ``params`` maps names to arrays that ``fn`` reads; they are perturbed in
    place and restored.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn()
            flat[i] = old - h
            fm = fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`` with Euclidean norms over the tensor."""
    num = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), GRAD_FLOOR)
    return num / den


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    h: float
    tolerance: float
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradcheck(
    loss_fn: Callable[[], "object"],
    params: Mapping[str, "object"],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    label: str = "",
) -> GradCheckReport:
    """Compare supplied analytic gradients with central differences of ``loss_fn``.

    ``params`` values expose a mutable ``.data`` array (or are arrays);
    ``loss_fn`` returns anything ``float()`` accepts.
    """
    arrays = {k: getattr(v, "data", v) for k, v in params.items()}
    numeric = finite_diff_grad(lambda: float(_value(loss_fn())), arrays, h)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in arrays}
    return GradCheckReport(errors, h, tolerance, label)


def _value(x):
    return getattr(x, "data", x)


def gaussian_mi_true(rho: float, dim: int) -> float:
    """MI in nats of ``dim`` independent coordinate pairs with correlation ``rho``."""
    if abs(rho) >= 1:
        raise ValueError("|rho| must be < 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return -0.5 * dim * math.log(1.0 - rho * rho)
