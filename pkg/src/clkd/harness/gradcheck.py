"""Finite-difference audit of every registered loss.

For each loss the student-side input is perturbed entry by entry with central
differences and compared with the tape gradient. The teacher-side input is
passed as a grad-requiring tensor; a correct loss must leave its gradient
untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..features import Projection, align, feature_kd_loss
from ..losses import (
    BASELINE_METRICS, DistillWeights, baseline_metric, cc_loss, class_loss, instance_loss, kd_kl, total_loss,
)

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass(frozen=True)
class SampleSpec:
    batch: int = 8
    classes: int = 10
    feature_dim: int = 6
    seeds: tuple[int, ...] = (0, 1, 2)
    tau: float = 4.0
    beta: float = 2.0


@dataclass(frozen=True)
class GradcheckRow:
    loss: str
    max_rel_error: float
    teacher_grad_norm: float
    passed: bool


LossFn = Callable[[T.Tensor, T.Tensor, np.ndarray], T.Tensor]


def registry(spec: SampleSpec) -> dict[str, tuple[LossFn, bool]]:
    """name -> (fn(student, teacher, labels), uses feature-shaped inputs)."""
    w = DistillWeights(tau=spec.tau, beta=spec.beta)
    reg: dict[str, tuple[LossFn, bool]] = {
        "kd_kl": (lambda s, t, y: kd_kl(s, t, spec.tau), False),
        "instance_loss": (lambda s, t, y: instance_loss(s, t), False),
        "class_loss": (lambda s, t, y: class_loss(s, t), False),
        "cc_loss": (lambda s, t, y: cc_loss(s, t), False),
        "total_loss": (lambda s, t, y: total_loss(s, y, t, w), False),
        "feature_kd_loss": (lambda s, t, y: feature_kd_loss(align(s, t, Projection.identity()), spec.beta), True),
    }
    for m in BASELINE_METRICS:
        reg[f"baseline_{m}"] = (lambda s, t, y, m=m: baseline_metric(s, t, m, spec.tau), False)
    return reg


def _numeric_grad(fn: LossFn, s: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = np.zeros_like(s)
    with T.no_grad():
        for idx in np.ndindex(s.shape):
            orig = s[idx]
            s[idx] = orig + EPS
            up = fn(T.Tensor(s), T.Tensor(t), y).item()
            s[idx] = orig - EPS
            down = fn(T.Tensor(s), T.Tensor(t), y).item()
            s[idx] = orig
            g[idx] = (up - down) / (2 * EPS)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_one(fn: LossFn, s: np.ndarray, t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    zs = T.Tensor(s.copy(), requires_grad=True)
    zt = T.Tensor(t.copy(), requires_grad=True)
    T.backward(fn(zs, zt, y))
    analytic = zs.grad if zs.grad is not None else np.zeros_like(s)
    t_norm = 0.0 if zt.grad is None else float(np.linalg.norm(zt.grad))
    return relative_error(analytic, _numeric_grad(fn, s.copy(), t, y)), t_norm


def gradcheck(spec: SampleSpec = SampleSpec()) -> list[GradcheckRow]:
    rows = []
    for name, (fn, feature_shaped) in registry(spec).items():
        width = spec.feature_dim if feature_shaped else spec.classes
        worst, t_worst = 0.0, 0.0
        for seed in spec.seeds:
            rng = np.random.default_rng(seed)
            s = rng.standard_normal((spec.batch, width)) * 2.0
            t = rng.standard_normal((spec.batch, width)) * 2.0
            y = rng.integers(0, spec.classes, spec.batch)
            err, t_norm = check_one(fn, s, t, y)
            worst, t_worst = max(worst, err), max(t_worst, t_norm)
        rows.append(GradcheckRow(name, worst, t_worst, worst < TOLERANCE and t_worst == 0.0))
    return rows


def format_rows(rows: list[GradcheckRow]) -> str:
    lines = [f"{'loss':<18} {'max_rel_error':>14} {'teacher_grad':>13}  status"]
    for r in rows:
        lines.append(f"{r.loss:<18} {r.max_rel_error:>14.3e} {r.teacher_grad_norm:>13.1e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
