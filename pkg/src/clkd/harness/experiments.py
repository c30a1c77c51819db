"""Experiment drivers behind the CLI.

Every (variant, seed) job is independent: it rebuilds the data from the
config, receives the teacher for its seed, and trains a student. Jobs can be
spread over a process pool; results are always assembled in (variant, seed)
order so reports do not depend on scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .. import models
from .. import tensor as T
from ..datasets import BatchIterator, Dataset, SyntheticSpec, gen_gaussian_blobs
from ..errors import ConfigError, TrainingError
from ..features import flatten_tap
from ..losses import DistillWeights, cross_entropy
from ..models import ModelSpec, Parameters
from ..trainer import (
    EpochRecord, OptimConfig, Schedule, STREAM_INIT, TrainState, distill_student, fit_teacher,
    lr_at_epoch, sgd_update, stream, stream_seed, topk_hits,
)
from .config import ExperimentConfig
from .report import ReportRow, RunReport, TimingRow, write_report

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("baseline", "KD", "w/o cla", "w/o cor", "CLKD")


def ablation_weights(w: DistillWeights) -> dict[str, DistillWeights]:
    """The five objectives of the loss ablation, derived from the full weights.

    Variants without the correlation term use ``w.with_nu(0)`` so every
    variant keeps the same lambda:mu ratio.
    """
    no_cc = w.with_nu(0.0)
    return {
        "baseline": DistillWeights(tau=w.tau, alpha=w.alpha, beta=0.0, lam=1.0, mu=0.0, nu=0.0, metric="nmse"),
        "KD": DistillWeights(tau=w.tau, alpha=w.alpha, beta=0.0, lam=no_cc.lam, mu=no_cc.mu, nu=0.0, metric="kl"),
        "w/o cla": DistillWeights(tau=w.tau, alpha=w.alpha, beta=0.0, lam=no_cc.lam, mu=no_cc.mu, nu=0.0, metric="nmse"),
        "w/o cor": DistillWeights(tau=w.tau, alpha=w.alpha, beta=w.beta, lam=no_cc.lam, mu=no_cc.mu, nu=0.0, metric="nmse"),
        "CLKD": DistillWeights(tau=w.tau, alpha=w.alpha, beta=w.beta, lam=w.lam, mu=w.mu, nu=w.nu, metric="nmse"),
    }


def vanilla_kd_weights(w: DistillWeights) -> DistillWeights:
    """``(1 - alpha) * CE + alpha * tau^2 * KL`` expressed as objective weights."""
    return DistillWeights(tau=w.tau, alpha=w.alpha, beta=0.0, lam=1.0 - w.alpha, mu=w.alpha, nu=0.0, metric="kl")


def label_free_weights(w: DistillWeights) -> DistillWeights:
    """Drop the CE term and renormalise mu and nu to sum to one."""
    rest = w.mu + w.nu
    if rest <= 0:
        raise ConfigError("label-free training needs mu + nu > 0", "distill")
    return replace(w, lam=0.0, mu=w.mu / rest, nu=1.0 - w.mu / rest)


# --------------------------------------------------------------------------
# single jobs


def rows_from_history(run_id: str, seed: int, history: Sequence[EpochRecord], n_batches: int) -> RunReport:
    rows, timings = [], []
    for h in history:
        rows.append(ReportRow(run_id, "epoch", seed, h.epoch, float(h.lr), h.ce, h.ins, h.cla, h.cc, h.feat,
                              h.train_acc, h.test_top1, h.test_topk))
        timings.append(TimingRow(run_id, seed, h.epoch, h.seconds, h.seconds / max(n_batches, 1)))
    if history:
        best = max(history, key=lambda h: (h.test_top1, -h.epoch))
        rows.append(ReportRow(run_id, "summary", seed, best.epoch, float(best.lr), best.ce, best.ins, best.cla,
                              best.cc, best.feat, best.train_acc, best.test_top1, best.test_topk))
    return RunReport(rows, timings)


def train_teacher(cfg: ExperimentConfig, seed: int, train: Dataset | None = None) -> Parameters:
    sec = cfg.teacher
    if sec.checkpoint:
        params = models.load(cfg.resolve(sec.checkpoint))
        _check_params(sec.spec, params, "teacher.checkpoint")
        return params
    if train is None:
        train, _ = cfg.load_data()
    params, _ = fit_teacher(sec.spec, train, sec.optim, sec.schedule, sec.epochs, seed, cfg.run.batch_size,
                            test=None, aug=cfg.augment, topk=cfg.run.topk)
    return params


def _check_params(spec: ModelSpec, params: Parameters, where: str) -> None:
    expected = models.init(spec)
    if {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in params.items()}:
        raise ConfigError("checkpoint does not match the model spec", where)


@dataclass(frozen=True)
class Job:
    cfg: ExperimentConfig
    run_id: str
    seed: int
    teacher: Parameters


def _run_job(job: Job) -> tuple[RunReport, Parameters]:
    cfg = job.cfg
    train, test = cfg.load_data()
    sec = cfg.student
    try:
        params, history = distill_student(sec.spec, cfg.teacher.spec, job.teacher, train, cfg.weights, sec.optim,
                                          sec.schedule, sec.epochs, job.seed, cfg.run.batch_size, test=test,
                                          aug=cfg.augment, features=cfg.features, topk=cfg.run.topk)
    except TrainingError as exc:
        raise TrainingError(f"student {job.run_id!r}, seed {job.seed}: {exc}") from exc
    n_batches = -(-len(train) // min(cfg.run.batch_size, len(train)))
    return rows_from_history(job.run_id, job.seed, history, n_batches), params


def _map(fn, jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def train_teachers(cfg: ExperimentConfig, seeds: Iterable[int], threads: int = 1) -> dict[int, Parameters]:
    seeds = list(seeds)
    if cfg.teacher.checkpoint:
        shared = train_teacher(cfg, seeds[0])
        return {s: shared for s in seeds}
    trained = _map(_teacher_job, [(cfg, s) for s in seeds], threads)
    return dict(zip(seeds, trained))


def _teacher_job(args) -> Parameters:
    cfg, seed = args
    try:
        return train_teacher(cfg, seed)
    except TrainingError as exc:
        raise TrainingError(f"teacher, seed {seed}: {exc}") from exc


def _ckpt_tag(run_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in run_id)


def _execute(base: ExperimentConfig, variants: list[tuple[str, ExperimentConfig]], out_dir: Path,
             report_name: str, threads: int = 1, teachers: dict[int, Parameters] | None = None,
             save_students: bool = True) -> tuple[RunReport, dict[int, Parameters]]:
    seeds = base.run.seeds
    if teachers is None:
        teachers = train_teachers(base, seeds, threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in seeds:
        models.save(teachers[s], out_dir / f"teacher_seed{s}.ckpt")
    jobs = [Job(cfg, run_id, s, teachers[s]) for run_id, cfg in variants for s in seeds]
    results = _map(_run_job, jobs, threads)
    report = RunReport()
    for job, (part, params) in zip(jobs, results):
        report.extend(part)
        if save_students:
            tag = "" if len(variants) == 1 else f"_{_ckpt_tag(job.run_id)}"
            models.save(params, out_dir / f"student{tag}_seed{job.seed}.ckpt")
    write_report(report, out_dir / f"{report_name}.csv", out_dir / f"{report_name}_timing.csv")
    return report, teachers


# --------------------------------------------------------------------------
# public drivers


def run(cfg: ExperimentConfig, threads: int = 1, out_dir: Path | None = None,
        teachers: dict[int, Parameters] | None = None) -> RunReport:
    """Train (or load) teachers and distill one student per seed."""
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    report, _ = _execute(cfg, [(cfg.run.name, cfg)], out, "report", threads, teachers)
    return report


def ablation(cfg: ExperimentConfig, threads: int = 1, out_dir: Path | None = None,
             teachers: dict[int, Parameters] | None = None) -> dict[str, RunReport]:
    out = Path(out_dir) if out_dir is not None else cfg.out_dir / "ablation"
    variants = [(name, cfg.with_weights(w)) for name, w in ablation_weights(cfg.weights).items()]
    combined, _ = _execute(cfg, variants, out, "ablation", threads, teachers)
    return {name: RunReport([r for r in combined.rows if r.run_id == name],
                            [t for t in combined.timings if t.run_id == name]) for name in ABLATION_VARIANTS}


def sweep(cfg: ExperimentConfig, path: str, values: Sequence[Any], threads: int = 1,
          out_dir: Path | None = None, teachers: dict[int, Parameters] | None = None) -> dict[Any, RunReport]:
    """One run per value per seed with ``path`` substituted; teachers are shared across values."""
    if not values:
        raise ConfigError("sweep needs at least one value", path)
    if path.startswith(("teacher.", "dataset.", "run.seeds")):
        raise ConfigError("sweeping teacher, dataset or seed settings is not supported", path)
    variants = [(f"{path}={v!r}", cfg.override(path, v)) for v in values]
    out = Path(out_dir) if out_dir is not None else cfg.out_dir / f"sweep_{_ckpt_tag(path)}"
    combined, _ = _execute(cfg, variants, out, "sweep", threads, teachers, save_students=False)
    return {v: RunReport([r for r in combined.rows if r.run_id == rid],
                         [t for t in combined.timings if t.run_id == rid])
            for v, (rid, _) in zip(values, variants)}


# --------------------------------------------------------------------------
# representation tools


def tap_features(spec: ModelSpec, params: Parameters, x: np.ndarray, tap: str, batch_size: int = 1024) -> np.ndarray:
    parts = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            _, taps = models.forward(spec, params, x[i:i + batch_size], (tap,))
            parts.append(flatten_tap(taps[tap]).data)
    return np.concatenate(parts, axis=0)


def export_embeddings(spec: ModelSpec, params: Parameters, data: Dataset, tap_id: str, out_path) -> None:
    feats = tap_features(spec, params, data.features, tap_id)
    lines = ["label," + ",".join(f"f{i}" for i in range(feats.shape[1]))]
    for label, row in zip(data.labels, feats):
        lines.append(f"{int(label)}," + ",".join(repr(float(v)) for v in row))
    try:
        models.atomic_write(out_path, ("\n".join(lines) + "\n").encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {out_path}: {exc}") from exc


def linear_probe(spec: ModelSpec, frozen: Parameters, tap_id: str, probe_train: Dataset, probe_test: Dataset,
                 optim: OptimConfig, epochs: int, schedule: Schedule | None = None, batch_size: int = 128,
                 seed: int = 0) -> float:
    """Train a fresh linear head on frozen tapped features; return its test top-1."""
    schedule = schedule or Schedule("constant")
    body = models.freeze(frozen)
    f_train = tap_features(spec, body, probe_train.features, tap_id)
    f_test = tap_features(spec, body, probe_test.features, tap_id)
    head_spec = ModelSpec("mlp", (f_train.shape[1],), probe_train.num_classes)
    head = models.init(head_spec, stream(seed, STREAM_INIT))
    feats = Dataset(f_train, probe_train.labels, probe_train.num_classes)
    it = BatchIterator(feats, min(batch_size, len(feats)), seed=stream_seed(seed, 1))
    state = TrainState()
    for epoch in range(epochs):
        lr = lr_at_epoch(schedule, optim.learning_rate, epoch)
        for idx in it.index_batches():
            logits, _ = models.forward(head_spec, head, f_train[idx])
            T.backward(cross_entropy(logits, probe_train.labels[idx]))
            sgd_update(head, state, optim, lr)
    with T.no_grad():
        logits, _ = models.forward(head_spec, head, f_test)
    return float(np.mean(topk_hits(logits.data, probe_test.labels, 1)))


def probe_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Transfer task: fresh blob centres (and optionally class count) in the same input space."""
    d = cfg.dataset
    if d["kind"] != "synthetic":
        return cfg.load_data()
    spec = SyntheticSpec(cfg.probe.num_classes, d["samples_per_class"], d["input_dim"], d["center_spread"],
                         d["noise"], d["clusters_per_class"], d["seed"] + cfg.probe.seed_offset)
    return gen_gaussian_blobs(spec)
