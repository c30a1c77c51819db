"""Distillation objectives on B x C logit matrices.

Student logits are differentiable tensors; teacher logits are always detached
before use, so no loss ever routes gradient into the teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import DegenerateBatchError, DimensionError, LabelError, ParameterError, RankError
from .tensor import Tensor

METRICS = ("kl", "js", "mse", "l1", "nmse")
BASELINE_METRICS = ("kl", "js", "mse", "l1")


@dataclass(frozen=True)
class DistillWeights:
    """Hyperparameters of the combined objective.

    ``lam``, ``mu`` and ``nu`` weight cross-entropy, the distillation term and
    the class-correlation term and must sum to one. ``alpha`` only feeds
    :func:`vanilla_kd_loss`.
    """

    tau: float = 4.0
    alpha: float = 0.9
    beta: float = 2.0
    lam: float = 0.1
    mu: float = 0.7
    nu: float = 0.2
    metric: str = "nmse"

    def __post_init__(self):
        object.__setattr__(self, "metric", str(self.metric).lower())
        self.validate()

    def validate(self) -> None:
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta >= 0:
            raise ParameterError(f"beta must be non-negative, got {self.beta}")
        for name in ("lam", "mu", "nu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        total = self.lam + self.mu + self.nu
        if abs(total - 1.0) > 1e-9:
            raise ParameterError(f"lam + mu + nu must equal 1, got {total!r}")
        if self.metric not in METRICS:
            raise ParameterError(f"unknown metric {self.metric!r}; expected one of {METRICS}")

    def with_nu(self, nu: float) -> DistillWeights:
        """Set ``nu`` and rescale ``lam``/``mu`` (keeping their ratio) so the three sum to one."""
        rest = self.lam + self.mu
        if rest <= 0:
            raise ParameterError("cannot rescale lam/mu when both are zero")
        k = (1.0 - nu) / rest
        return replace(self, lam=self.lam * k, mu=1.0 - nu - self.lam * k, nu=nu)

    def with_mu_lambda_ratio(self, ratio: float) -> DistillWeights:
        """Set ``mu / lam`` to ``ratio`` while keeping ``nu`` fixed."""
        if ratio < 0:
            raise ParameterError(f"mu/lambda ratio must be non-negative, got {ratio}")
        rest = 1.0 - self.nu
        lam = rest / (1.0 + ratio)
        return replace(self, lam=lam, mu=rest - lam)


def _student(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise RankError(f"logits must be a 2-D (batch x classes) matrix, got shape {x.shape}")
    return x


def _teacher(x) -> Tensor:
    return _student(x).detach()


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"student {a.shape} and teacher {b.shape} shapes differ")


def _need_batch(x: Tensor, what: str) -> None:
    if x.shape[0] < 2:
        raise DegenerateBatchError(f"{what} needs at least 2 instances per batch, got {x.shape[0]}")


def nmse(p, z) -> Tensor:
    """Mean over rows of ``||p_i/||p_i|| - z_i/||z_i|| ||^2`` (equivalently ``2 - 2 cos``)."""
    p, z = T.as_tensor(p), T.as_tensor(z)
    if p.shape != z.shape:
        raise DimensionError(f"nmse: shapes {p.shape} and {z.shape} differ")
    d = T.l2_normalize_rows(p) - T.l2_normalize_rows(z)
    return T.mean(T.sum(T.square(d), axis=1))


def kd_kl(zs, zt, tau: float) -> Tensor:
    """``tau^2`` times the mean row KL(teacher || student) of the softened distributions."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    log_pt = T.log_softmax_rows(zt, tau).data
    pt = np.exp(log_pt)
    log_ps = T.log_softmax_rows(zs, tau)
    # sum_c pt*log pt is constant w.r.t. the student
    cross = T.sum(T.mul(log_ps, pt), axis=1)
    per_row = T.sub(Tensor((pt * log_pt).sum(axis=1)), cross)
    return T.scale(T.mean(per_row), tau * tau)


def _class_view(z: Tensor) -> Tensor:
    return T.transpose(T.l2_normalize_rows(z))


def instance_loss(zs, zt) -> Tensor:
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    return nmse(zs, zt)


def class_loss(zs, zt) -> Tensor:
    """NMSE between the columns of the row-normalised logit matrices."""
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    _need_batch(zs, "class_loss")
    return nmse(_class_view(zs), _class_view(zt))


@dataclass
class CorrelationMatrix:
    values: Tensor
    normalizer: float


def class_correlation(z) -> CorrelationMatrix:
    """C x C second moment of the batch-centred logits, divided by ``C - 1``."""
    z = _student(z)
    _need_batch(z, "class_correlation")
    b, c = z.shape
    # differences to the first row are exact, so identical rows give an exact zero
    shift = np.eye(b)
    shift[:, 0] -= 1.0
    center = np.eye(b) - 1.0 / b
    centered = T.matmul(Tensor(center), T.matmul(Tensor(shift), z))
    gram = T.matmul(T.transpose(centered), centered)
    return CorrelationMatrix(T.scale(gram, 1.0 / (c - 1)), float(c - 1))


def cc_loss(zs, zt) -> Tensor:
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    c = zs.shape[1]
    diff = class_correlation(zs).values - class_correlation(zt).values
    return T.scale(T.frobenius_norm_sq(diff), 1.0 / (c * c))


def kd_loss(zs, zt, beta: float) -> Tensor:
    if not beta >= 0:
        raise ParameterError(f"beta must be non-negative, got {beta}")
    loss = instance_loss(zs, zt)
    if beta > 0:
        loss = loss + T.scale(class_loss(zs, zt), beta)
    return loss


def cross_entropy(z, labels) -> Tensor:
    z = _student(z)
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise LabelError(f"labels must lie in [0, {z.shape[1]}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(z.shape)
    onehot[np.arange(z.shape[0]), labels.astype(np.int64)] = 1.0
    picked = T.sum(T.mul(T.log_softmax_rows(z), onehot), axis=1)
    return T.neg(T.mean(picked))


def _js_rows(zs: Tensor, zt: Tensor, tau: float) -> Tensor:
    log_q = T.log_softmax_rows(zs, tau)
    q = T.exp(log_q)
    log_p = T.log_softmax_rows(zt, tau).data
    p = np.exp(log_p)
    log_m = T.log(T.scale(T.add(q, p), 0.5))
    kl_pm = T.sum(T.mul(T.sub(log_p, log_m), p), axis=1)
    kl_qm = T.sum(T.mul(T.sub(log_q, log_m), q), axis=1)
    return T.scale(T.add(kl_pm, kl_qm), 0.5)


def baseline_metric(zs, zt, metric: str, tau: float = 4.0) -> Tensor:
    """Per-row discrepancy averaged over the batch.

    ``kl`` and ``js`` compare temperature-softened distributions and carry the
    usual ``tau^2`` gradient-scale factor; ``mse`` and ``l1`` compare raw
    logits (squared / absolute error summed over classes).
    """
    metric = str(metric).lower()
    if metric not in BASELINE_METRICS:
        raise ParameterError(f"unknown metric {metric!r}; expected one of {BASELINE_METRICS}")
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    if metric == "kl":
        return kd_kl(zs, zt, tau)
    if metric == "js":
        return T.scale(T.mean(_js_rows(zs, zt, tau)), tau * tau)
    d = T.sub(zs, zt)
    per = T.square(d) if metric == "mse" else T.absolute(d)
    return T.mean(T.sum(per, axis=1))


def instance_term(zs, zt, metric: str, tau: float) -> Tensor:
    if metric == "nmse":
        return instance_loss(zs, zt)
    return baseline_metric(zs, zt, metric, tau)


def class_term(zs, zt, metric: str, tau: float) -> Tensor:
    """Class-level counterpart of :func:`instance_term` on normalised-then-transposed logits."""
    if metric == "nmse":
        return class_loss(zs, zt)
    zs, zt = _student(zs), _teacher(zt)
    _same_shape(zs, zt)
    _need_batch(zs, "class-level distillation")
    return baseline_metric(_class_view(zs), _class_view(zt), metric, tau)


def objective_terms(zs, labels, zt, w: DistillWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective plus its unweighted components.

    Terms with zero weight are skipped entirely and reported as 0.0, so e.g.
    ``lam=1, mu=nu=0`` reduces to exactly the cross-entropy graph.
    """
    zs = _student(zs)
    parts = {"ce": 0.0, "ins": 0.0, "cla": 0.0, "cc": 0.0}
    total = None

    def acc(term: Tensor, weight: float) -> None:
        nonlocal total
        weighted = term if weight == 1.0 else T.scale(term, weight)
        total = weighted if total is None else total + weighted

    if w.lam > 0:
        ce = cross_entropy(zs, labels)
        parts["ce"] = ce.item()
        acc(ce, w.lam)
    if w.mu > 0:
        ins = instance_term(zs, zt, w.metric, w.tau)
        parts["ins"] = ins.item()
        kd = ins
        if w.beta > 0:
            cla = class_term(zs, zt, w.metric, w.tau)
            parts["cla"] = cla.item()
            kd = kd + T.scale(cla, w.beta)
        acc(kd, w.mu)
    if w.nu > 0:
        cc = cc_loss(zs, zt)
        parts["cc"] = cc.item()
        acc(cc, w.nu)
    if total is None:
        total = T.scale(T.sum(zs), 0.0)
    return total, parts


def total_loss(zs, labels, zt, w: DistillWeights) -> Tensor:
    """``lam * CE + mu * (ins + beta * cla) + nu * CC``; ``labels`` may be None when ``lam == 0``."""
    return objective_terms(zs, labels, zt, w)[0]


def vanilla_kd_loss(zs, labels, zt, alpha: float, tau: float) -> Tensor:
    """``(1 - alpha) * CE + alpha * tau^2 * KL``."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return T.scale(cross_entropy(zs, labels), 1.0 - alpha) + T.scale(kd_kl(zs, zt, tau), alpha)


LN2 = math.log(2.0)
