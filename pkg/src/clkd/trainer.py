"""SGD with momentum, learning-rate schedules, and the teacher/student loops.

Randomness discipline: a run's master seed is split into independent
counter-based (Philox) streams for parameter init, batch order, augmentation
and projection init. Two runs that differ only in their loss therefore see
identical initial weights and identical batch sequences.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models
from . import tensor as T
from .datasets import BatchIterator, Dataset, augment
from .errors import DimensionError, ParameterError, StateError, TrainingError
from .features import FeatureDistillConfig, Projection, align, feature_correlation_loss, feature_kd_loss
from .losses import DistillWeights, cross_entropy, objective_terms
from .models import ModelSpec, Parameters

log = logging.getLogger(__name__)

STREAM_INIT, STREAM_BATCH, STREAM_AUG, STREAM_PROJ = range(4)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), which])))


def stream_seed(seed: int, which: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), which])


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ParameterError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass(frozen=True)
class Schedule:
    kind: str = "step"
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    warmup: int = 0
    total: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.kind not in ("step", "warmup_cosine", "constant"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ParameterError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.kind == "warmup_cosine" and not 0 <= self.warmup < self.total:
            raise ParameterError(f"need 0 <= warmup < total, got warmup={self.warmup}, total={self.total}")

    @classmethod
    def scaled_step(cls, epochs: int, factor: float = 0.1) -> Schedule:
        """The 240-epoch recipe (decay at 150/180/210) shrunk to ``epochs``."""
        ms = sorted({max(1, round(epochs * m / 240)) for m in (150, 180, 210)})
        return cls("step", tuple(ms), factor)


def lr_at_epoch(schedule: Schedule, base_lr: float, epoch: int) -> float:
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind == "step":
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return base_lr * schedule.factor ** passed
    if epoch < schedule.warmup:
        return base_lr * epoch / schedule.warmup
    if epoch >= schedule.total:
        return 0.0
    progress = (epoch - schedule.warmup) / (schedule.total - schedule.warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    epoch: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    best_epoch: int = -1
    best_top1: float = -1.0

    def record(self, epoch: int, top1: float) -> None:
        if top1 > self.best_top1:
            self.best_top1, self.best_epoch = top1, epoch


def sgd_update(params: Parameters, state: TrainState, cfg: OptimConfig, lr: float) -> None:
    """One SGD step with L2-coupled weight decay and optional Nesterov momentum."""
    m, wd = cfg.momentum, cfg.weight_decay
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        d = p.grad + wd * p.data if wd else p.grad
        v = state.momentum.get(name)
        v = d.copy() if v is None else m * v + d
        state.momentum[name] = v
        step = d + m * v if cfg.nesterov else v
        p.data = p.data - lr * step
        p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float = 0.0
    ins: float = 0.0
    cla: float = 0.0
    cc: float = 0.0
    feat: float = 0.0
    train_acc: float = 0.0
    test_top1: float = 0.0
    test_topk: float = 0.0
    seconds: float = 0.0


def evaluate_topk(spec: ModelSpec, params: Parameters, data: Dataset, k: int = 1,
                  batch_size: int = 1024) -> float:
    """Fraction of samples whose label is among the ``k`` largest logits.

    Ties are broken toward the lower class index.
    """
    if not 1 <= k <= spec.num_classes:
        raise ParameterError(f"k must lie in [1, {spec.num_classes}], got {k}")
    hits = 0
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            logits, _ = models.forward(spec, params, data.features[i:i + batch_size])
            hits += int(np.sum(topk_hits(logits.data, data.labels[i:i + batch_size], k)))
    return hits / len(data)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


LossFn = Callable[[T.Tensor, np.ndarray, np.ndarray], tuple[T.Tensor, dict[str, float]]]


@dataclass(frozen=True)
class AugmentFlags:
    horizontal_flip: bool = False
    pad_crop: bool = False


def _train_loop(spec: ModelSpec, params: Parameters, train: Dataset, test: Dataset | None,
                loss_fn: LossFn, optim: OptimConfig, schedule: Schedule, epochs: int, seed: int,
                batch_size: int, aug: AugmentFlags, topk: int, extra: Parameters | None = None,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[TrainState, list[EpochRecord]]:
    trainable = dict(params)
    if extra:
        trainable.update(extra)
    state = TrainState()
    history: list[EpochRecord] = []
    it = BatchIterator(train, min(batch_size, len(train)), seed=stream_seed(seed, STREAM_BATCH))
    aug_rng = stream(seed, STREAM_AUG)
    k = min(topk, spec.num_classes)
    for epoch in range(epochs):
        lr = lr_at_epoch(schedule, optim.learning_rate, epoch)
        t0 = time.perf_counter()
        sums = {"ce": 0.0, "ins": 0.0, "cla": 0.0, "cc": 0.0, "feat": 0.0}
        correct = seen = n_batches = 0
        for b, idx in enumerate(it.index_batches()):
            x = augment(train.features[idx], aug_rng, aug.horizontal_flip, aug.pad_crop)
            y = train.labels[idx]
            loss, parts, logits = loss_fn(x, y, idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value}", epoch, b)
            T.backward(loss)
            for name, p in trainable.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingError(f"non-finite gradient in {name!r}", epoch, b)
            sgd_update(trainable, state, optim, lr)
            for key, v in parts.items():
                sums[key] += v
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(y)
            n_batches += 1
        rec = EpochRecord(epoch, lr, **{k_: v / max(n_batches, 1) for k_, v in sums.items()})
        rec.train_acc = correct / max(seen, 1)
        if test is not None:
            rec.test_top1 = evaluate_topk(spec, params, test, 1)
            rec.test_topk = evaluate_topk(spec, params, test, k)
        rec.seconds = time.perf_counter() - t0
        state.epoch = epoch + 1
        state.record(epoch, rec.test_top1)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d lr %.4g top1 %.4f", epoch, lr, rec.test_top1)
    return state, history


def fit_teacher(spec: ModelSpec, train: Dataset, optim: OptimConfig, schedule: Schedule, epochs: int,
                seed: int, batch_size: int = 64, test: Dataset | None = None,
                aug: AugmentFlags = AugmentFlags(), topk: int = 5) -> tuple[Parameters, list[EpochRecord]]:
    """Plain cross-entropy training; returns final parameters and per-epoch records."""
    params = models.init(spec, stream(seed, STREAM_INIT))

    def loss_fn(x, y, idx):
        logits, _ = models.forward(spec, params, x)
        ce = cross_entropy(logits, y)
        return ce, {"ce": ce.item()}, logits

    _, history = _train_loop(spec, params, train, test, loss_fn, optim, schedule, epochs, seed,
                             batch_size, aug, topk)
    return params, history


def distill_student(student_spec: ModelSpec, teacher_spec: ModelSpec, teacher: Parameters,
                    train: Dataset, w: DistillWeights, optim: OptimConfig, schedule: Schedule,
                    epochs: int, seed: int, batch_size: int = 64, test: Dataset | None = None,
                    aug: AugmentFlags = AugmentFlags(), features: FeatureDistillConfig | None = None,
                    topk: int = 5) -> tuple[Parameters, list[EpochRecord]]:
    """Train a student against a frozen teacher with the weighted objective.

    The teacher sees the same (augmented) batch as the student, under
    ``no_grad``; its parameters are never modified.
    """
    if student_spec.num_classes != teacher_spec.num_classes:
        raise DimensionError(
            f"student has {student_spec.num_classes} classes, teacher has {teacher_spec.num_classes}")
    frozen = models.freeze(teacher)
    params = models.init(student_spec, stream(seed, STREAM_INIT))
    feats = features if features is not None and features.enabled else None
    proj = None
    extra: Parameters = {}
    s_taps: tuple[str, ...] = ()
    t_taps: tuple[str, ...] = ()
    if feats is not None:
        s_taps, t_taps = (feats.student_tap,), (feats.teacher_tap,)
        d_s = _tap_width(student_spec, feats.student_tap)
        d_t = _tap_width(teacher_spec, feats.teacher_tap)
        if feats.identity:
            if d_s != d_t:
                raise DimensionError(f"identity projection needs equal widths, got {d_s} and {d_t}")
            proj = Projection.identity()
        else:
            proj = Projection.linear(d_s, d_t, stream(seed, STREAM_PROJ))
        extra = proj.parameters()

    def loss_fn(x, y, idx):
        with T.no_grad():
            zt, t_feat = models.forward(teacher_spec, frozen, x, t_taps)
        zs, s_feat = models.forward(student_spec, params, x, s_taps)
        total, parts = objective_terms(zs, y, zt, w)
        if feats is not None:
            aligned = align(s_feat[feats.student_tap], t_feat[feats.teacher_tap], proj)
            fl = feature_kd_loss(aligned, feats.beta_f)
            parts["feat"] = fl.item()
            total = total + T.scale(fl, feats.weight)
            if feats.corr_weight > 0:
                total = total + T.scale(feature_correlation_loss(aligned), feats.corr_weight)
        return total, parts, zs

    _, history = _train_loop(student_spec, params, train, test, loss_fn, optim, schedule, epochs, seed,
                             batch_size, aug, topk, extra=extra)
    return params, history


def _tap_width(spec: ModelSpec, tap: str) -> int:
    if tap == "penultimate":
        return spec.feature_dim
    if tap.startswith("h"):
        return spec.hidden_sizes[int(tap[1:])]
    if tap.startswith("conv"):
        return spec.channels[int(tap[4:])]
    raise ParameterError(f"unknown feature tap {tap!r}")
