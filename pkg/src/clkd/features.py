"""Class-aware distillation applied to intermediate features.

Student features pass through a trainable linear projection to the teacher's
width; teacher features are only flattened (spatial maps are average-pooled)
and detached. The loss mirrors the logit objective: a row-wise NMSE between
instances plus an NMSE between the columns of the row-normalised matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateBatchError, DimensionError, ParameterError
from .losses import cc_loss, nmse
from .models import FeatureTap
from .tensor import Tensor


@dataclass
class Projection:
    """``x @ weight + bias``; ``weight is None`` means identity."""

    weight: Tensor | None = None
    bias: Tensor | None = None

    @classmethod
    def identity(cls) -> Projection:
        return cls()

    @classmethod
    def linear(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> Projection:
        w = rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls(Tensor(w, requires_grad=True), b)

    @property
    def is_identity(self) -> bool:
        return self.weight is None

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.weight is not None:
            out["proj.weight"] = self.weight
        if self.bias is not None:
            out["proj.bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight is None:
            return x
        if x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"projection expects {self.weight.shape[0]} input features, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


@dataclass
class AlignedFeatures:
    student: Tensor
    teacher: Tensor

    def __post_init__(self):
        if self.student.shape != self.teacher.shape:
            raise DimensionError(
                f"aligned features differ in shape: {self.student.shape} vs {self.teacher.shape}")


def flatten_tap(x: Tensor) -> Tensor:
    """B x D view of a tap; (B, C, H, W) maps are globally average-pooled first."""
    if x.ndim == 4:
        return T.global_avg_pool(x)
    if x.ndim == 2:
        return x
    return T.reshape(x, (x.shape[0], -1))


def align(student_tap, teacher_tap, proj: Projection) -> AlignedFeatures:
    s = student_tap.value if isinstance(student_tap, FeatureTap) else T.as_tensor(student_tap)
    t = teacher_tap.value if isinstance(teacher_tap, FeatureTap) else T.as_tensor(teacher_tap)
    if s.shape[0] != t.shape[0]:
        raise DimensionError(f"student batch {s.shape[0]} != teacher batch {t.shape[0]}")
    fs = proj(flatten_tap(s))
    ft = flatten_tap(t.detach())
    if fs.shape != ft.shape:
        raise DimensionError(f"projected student features {fs.shape} do not match teacher {ft.shape}")
    return AlignedFeatures(fs, ft.detach())


def feature_kd_loss(f: AlignedFeatures, beta_f: float) -> Tensor:
    if not beta_f >= 0:
        raise ParameterError(f"beta_f must be non-negative, got {beta_f}")
    fs, ft = f.student, f.teacher.detach()
    loss = nmse(fs, ft)
    if beta_f > 0:
        if fs.shape[0] < 2:
            raise DegenerateBatchError("cross-instance feature term needs at least 2 instances")
        cross = nmse(T.transpose(T.l2_normalize_rows(fs)), T.transpose(T.l2_normalize_rows(ft)))
        loss = loss + T.scale(cross, beta_f)
    return loss


def feature_correlation_loss(f: AlignedFeatures) -> Tensor:
    """Correlation-matrix discrepancy on the D feature columns."""
    return cc_loss(f.student, f.teacher)


@dataclass(frozen=True)
class FeatureDistillConfig:
    enabled: bool = False
    student_tap: str = "penultimate"
    teacher_tap: str = "penultimate"
    beta_f: float = 1.0
    weight: float = 1.0
    corr_weight: float = 0.0
    identity: bool = False

    def __post_init__(self):
        for name in ("beta_f", "weight", "corr_weight"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")
