"""Experiment configuration: a TOML tree merged over defaults.

The merged tree is kept on the parsed config so sweeps can substitute a
single dotted path (``distill.beta``, ``run.batch_size``...) and re-validate.
See ``configs/README.md`` for the full key reference.
"""

from __future__ import annotations

import copy
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..datasets import Dataset, SyntheticSpec, gen_gaussian_blobs, load_idx
from ..errors import ClkdError, ConfigError
from ..features import FeatureDistillConfig
from ..losses import DistillWeights
from ..models import ModelSpec
from ..trainer import AugmentFlags, OptimConfig, Schedule

_OPTIM = {"learning_rate": 0.05, "momentum": 0.9, "nesterov": True, "weight_decay": 5e-4}
_SCHEDULE = {"kind": "step", "milestones": [38, 45, 52], "factor": 0.1, "warmup": 0, "total": 0}

DEFAULTS: dict[str, Any] = {
    "dataset": {
        "kind": "synthetic",
        "num_classes": 10,
        "samples_per_class": 250,
        "input_dim": 16,
        "center_spread": 1.5,
        "noise": 1.0,
        "clusters_per_class": 4,
        "seed": 0,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "augment": {"horizontal_flip": False, "pad_crop": False},
    },
    "teacher": {
        "kind": "mlp",
        "hidden_sizes": [128, 128],
        "channels": [],
        "kernel_size": 3,
        "epochs": 60,
        "checkpoint": "",
        "optim": dict(_OPTIM),
        "schedule": dict(_SCHEDULE),
    },
    "student": {
        "kind": "mlp",
        "hidden_sizes": [16],
        "channels": [],
        "kernel_size": 3,
        "epochs": 60,
        "checkpoint": "",
        "optim": dict(_OPTIM),
        "schedule": dict(_SCHEDULE),
    },
    "distill": {
        "tau": 4.0,
        "alpha": 0.9,
        "beta": 2.0,
        "lambda": 0.1,
        "mu": 0.7,
        "nu": 0.2,
        "metric": "nmse",
        "features": {
            "enabled": False,
            "student_tap": "penultimate",
            "teacher_tap": "penultimate",
            "beta_f": 1.0,
            "weight": 1.0,
            "corr_weight": 0.0,
            "identity": False,
        },
    },
    "run": {"name": "clkd", "seeds": [1, 2, 3, 4, 5], "batch_size": 64, "topk": 5, "out_dir": "runs/default"},
    "probe": {
        "model": "student",
        "tap": "penultimate",
        "epochs": 40,
        "batch_size": 128,
        "seed_offset": 1000,
        "num_classes": 10,
        "optim": {"learning_rate": 0.1, "momentum": 0.9, "nesterov": False, "weight_decay": 0.0},
        "schedule": {"kind": "step", "milestones": [10, 20, 30], "factor": 0.1, "warmup": 0, "total": 0},
    },
}

# sweepable paths that are not plain keys of the tree
DERIVED_PATHS = ("distill.mu_lambda_ratio",)


def _merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", where)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a table", where)
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _typed(tree: dict, path: str, kind):
    node: Any = tree
    for part in path.split("."):
        node = node[part]
    if kind is float and isinstance(node, int) and not isinstance(node, bool):
        node = float(node)
    if kind is list:
        if not isinstance(node, list):
            raise ConfigError("expected a list", path)
        return node
    if not isinstance(node, kind) or (kind is int and isinstance(node, bool)):
        raise ConfigError(f"expected {kind.__name__}, got {node!r}", path)
    return node


def _build(path: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ClkdError as exc:
        raise ConfigError(str(exc), path) from None


@dataclass(frozen=True)
class ModelSection:
    spec: ModelSpec
    optim: OptimConfig
    schedule: Schedule
    epochs: int
    checkpoint: str


@dataclass(frozen=True)
class RunSection:
    name: str
    seeds: tuple[int, ...]
    batch_size: int
    topk: int
    out_dir: str


@dataclass(frozen=True)
class ProbeSection:
    model: str
    tap: str
    epochs: int
    batch_size: int
    seed_offset: int
    num_classes: int
    optim: OptimConfig
    schedule: Schedule


@dataclass(frozen=True)
class ExperimentConfig:
    tree: dict = field(repr=False, compare=False)
    dataset: dict
    augment: AugmentFlags
    teacher: ModelSection
    student: ModelSection
    weights: DistillWeights
    features: FeatureDistillConfig
    run: RunSection
    probe: ProbeSection
    base_dir: str = "."

    # ----------------------------------------------------------------- io

    @classmethod
    def from_tree(cls, user: dict, base_dir: str | Path = ".") -> ExperimentConfig:
        tree = _merge(DEFAULTS, user)
        return cls._from_merged(tree, str(base_dir))

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            user = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML parse error: {exc}", str(path)) from None
        return cls.from_tree(user, path.parent)

    def to_tree(self) -> dict:
        return copy.deepcopy(self.tree)

    # -------------------------------------------------------------- derive

    def override(self, path: str, value: Any) -> ExperimentConfig:
        """New config with ``path`` set to ``value``.

        ``distill.nu`` rescales lambda and mu to keep the three weights summing
        to one; ``distill.mu_lambda_ratio`` sets mu/lambda with nu fixed.
        """
        tree = self.to_tree()
        if path == "distill.nu":
            w = self.weights.with_nu(float(value))
            tree["distill"].update({"lambda": w.lam, "mu": w.mu, "nu": w.nu})
        elif path == "distill.mu_lambda_ratio":
            w = self.weights.with_mu_lambda_ratio(float(value))
            tree["distill"].update({"lambda": w.lam, "mu": w.mu})
        else:
            node = tree
            parts = path.split(".")
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError("path does not resolve in the config", path)
                node = node[part]
            if parts[-1] not in node or isinstance(node[parts[-1]], dict):
                raise ConfigError("path does not resolve to a value in the config", path)
            node[parts[-1]] = value
        return type(self)._from_merged(tree, self.base_dir)

    def with_weights(self, w: DistillWeights) -> ExperimentConfig:
        tree = self.to_tree()
        tree["distill"].update({"tau": w.tau, "alpha": w.alpha, "beta": w.beta, "lambda": w.lam,
                                "mu": w.mu, "nu": w.nu, "metric": w.metric})
        return type(self)._from_merged(tree, self.base_dir)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.run.out_dir)

    # ---------------------------------------------------------------- data

    def load_data(self) -> tuple[Dataset, Dataset]:
        d = self.dataset
        if d["kind"] == "synthetic":
            spec = SyntheticSpec(d["num_classes"], d["samples_per_class"], d["input_dim"], d["center_spread"],
                                 d["noise"], d["clusters_per_class"], d["seed"])
            return gen_gaussian_blobs(spec)
        train = load_idx(self.resolve(d["train_images"]), self.resolve(d["train_labels"]),
                         d["num_classes"], "train")
        test = load_idx(self.resolve(d["test_images"]), self.resolve(d["test_labels"]),
                        d["num_classes"], "test", stats=train.stats)
        return train, test

    # --------------------------------------------------------------- build

    @classmethod
    def _from_merged(cls, tree: dict, base_dir: str) -> ExperimentConfig:
        d = tree["dataset"]
        kind = _typed(tree, "dataset.kind", str)
        if kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {kind!r}", "dataset.kind")
        for key in ("num_classes", "samples_per_class", "input_dim", "clusters_per_class", "seed"):
            _typed(tree, f"dataset.{key}", int)
        for key in ("center_spread", "noise"):
            d[key] = _typed(tree, f"dataset.{key}", float)
        if kind == "synthetic":
            _build("dataset", SyntheticSpec, num_classes=d["num_classes"], samples_per_class=d["samples_per_class"],
                   input_dim=d["input_dim"], center_spread=d["center_spread"], noise=d["noise"],
                   clusters_per_class=d["clusters_per_class"], seed=d["seed"])
        else:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                p = _typed(tree, f"dataset.{key}", str)
                full = Path(p) if Path(p).is_absolute() else Path(base_dir) / p
                if not p or not full.is_file():
                    raise ConfigError(f"file not found: {p!r}", f"dataset.{key}")
        augment = AugmentFlags(_typed(tree, "dataset.augment.horizontal_flip", bool),
                               _typed(tree, "dataset.augment.pad_crop", bool))
        if kind == "synthetic" and (augment.horizontal_flip or augment.pad_crop):
            raise ConfigError("augmentation needs image data", "dataset.augment")

        shape = _input_shape(d, base_dir)
        teacher = cls._model_section(tree, "teacher", shape, d["num_classes"], base_dir)
        student = cls._model_section(tree, "student", shape, d["num_classes"], base_dir)

        dist = tree["distill"]
        for key in ("tau", "alpha", "beta", "lambda", "mu", "nu"):
            dist[key] = _typed(tree, f"distill.{key}", float)
        weights = _build("distill", DistillWeights, tau=dist["tau"], alpha=dist["alpha"], beta=dist["beta"],
                         lam=dist["lambda"], mu=dist["mu"], nu=dist["nu"], metric=_typed(tree, "distill.metric", str))
        f = dist["features"]
        for key in ("beta_f", "weight", "corr_weight"):
            f[key] = _typed(tree, f"distill.features.{key}", float)
        features = _build("distill.features", FeatureDistillConfig,
                          enabled=_typed(tree, "distill.features.enabled", bool),
                          student_tap=_typed(tree, "distill.features.student_tap", str),
                          teacher_tap=_typed(tree, "distill.features.teacher_tap", str),
                          beta_f=f["beta_f"], weight=f["weight"], corr_weight=f["corr_weight"],
                          identity=_typed(tree, "distill.features.identity", bool))
        if features.enabled:
            if features.student_tap not in student.spec.tap_ids():
                raise ConfigError(f"unknown tap {features.student_tap!r}", "distill.features.student_tap")
            if features.teacher_tap not in teacher.spec.tap_ids():
                raise ConfigError(f"unknown tap {features.teacher_tap!r}", "distill.features.teacher_tap")

        seeds = _typed(tree, "run.seeds", list)
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("need at least one integer seed", "run.seeds")
        batch = _typed(tree, "run.batch_size", int)
        if batch < 1:
            raise ConfigError("must be >= 1", "run.batch_size")
        topk = _typed(tree, "run.topk", int)
        if not 1 <= topk <= d["num_classes"]:
            raise ConfigError(f"must lie in [1, {d['num_classes']}]", "run.topk")
        run = RunSection(_typed(tree, "run.name", str), tuple(seeds), batch, topk, _typed(tree, "run.out_dir", str))

        probe_tree = tree["probe"]
        if _typed(tree, "probe.model", str) not in ("student", "teacher"):
            raise ConfigError("must be 'student' or 'teacher'", "probe.model")
        probe = ProbeSection(probe_tree["model"], _typed(tree, "probe.tap", str), _typed(tree, "probe.epochs", int),
                             _typed(tree, "probe.batch_size", int), _typed(tree, "probe.seed_offset", int),
                             _typed(tree, "probe.num_classes", int),
                             cls._optim(tree, "probe.optim"), cls._schedule(tree, "probe.schedule"))
        if probe.num_classes < 2:
            raise ConfigError("must be >= 2", "probe.num_classes")

        return cls(tree=tree, dataset=d, augment=augment, teacher=teacher, student=student, weights=weights,
                   features=features, run=run, probe=probe, base_dir=base_dir)

    @staticmethod
    def _optim(tree: dict, path: str) -> OptimConfig:
        return _build(path, OptimConfig,
                      learning_rate=_typed(tree, f"{path}.learning_rate", float),
                      momentum=_typed(tree, f"{path}.momentum", float),
                      nesterov=_typed(tree, f"{path}.nesterov", bool),
                      weight_decay=_typed(tree, f"{path}.weight_decay", float))

    @staticmethod
    def _schedule(tree: dict, path: str) -> Schedule:
        return _build(path, Schedule, kind=_typed(tree, f"{path}.kind", str),
                      milestones=tuple(_typed(tree, f"{path}.milestones", list)),
                      factor=_typed(tree, f"{path}.factor", float),
                      warmup=_typed(tree, f"{path}.warmup", int),
                      total=_typed(tree, f"{path}.total", int))

    @classmethod
    def _model_section(cls, tree: dict, name: str, shape, num_classes: int, base_dir: str) -> ModelSection:
        sec = tree[name]
        spec = _build(name, ModelSpec, kind=_typed(tree, f"{name}.kind", str), input_shape=shape,
                      num_classes=num_classes, hidden_sizes=tuple(_typed(tree, f"{name}.hidden_sizes", list)),
                      channels=tuple(_typed(tree, f"{name}.channels", list)),
                      kernel_size=_typed(tree, f"{name}.kernel_size", int))
        epochs = _typed(tree, f"{name}.epochs", int)
        if epochs < 0:
            raise ConfigError("must be >= 0", f"{name}.epochs")
        ckpt = _typed(tree, f"{name}.checkpoint", str)
        if ckpt:
            full = Path(ckpt) if Path(ckpt).is_absolute() else Path(base_dir) / ckpt
            if not full.is_file():
                raise ConfigError(f"checkpoint not found: {ckpt!r}", f"{name}.checkpoint")
        return ModelSection(spec, cls._optim(tree, f"{name}.optim"), cls._schedule(tree, f"{name}.schedule"),
                            epochs, sec["checkpoint"])


def _input_shape(d: dict, base_dir: str) -> tuple[int, ...]:
    if d["kind"] == "synthetic":
        return (d["input_dim"],)
    p = Path(d["train_images"])
    with open(p if p.is_absolute() else Path(base_dir) / p, "rb") as f:
        head = f.read(16)
    if len(head) < 16:
        raise ConfigError("IDX image header is truncated", "dataset.train_images")
    _, _, rows, cols = struct.unpack(">IIII", head)
    return (1, rows, cols)


def parse_value(text: str) -> Any:
    """Interpret a CLI string the way TOML would (numbers, booleans, lists), else keep it a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text
