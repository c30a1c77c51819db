"""Small ReLU classifiers used as teachers and students, plus checkpoint I/O.

Two kinds exist: ``mlp`` (flat input, dense hidden layers) and ``convnet``
(3x3 "same" convolutions, global average pooling, linear head). Parameters
are an ordered ``dict`` of name -> :class:`~clkd.tensor.Tensor`.

Feature taps: ``h0, h1, ...`` are post-ReLU hidden activations (``conv0, ...``
for the convnet, 4-D), ``penultimate`` is the representation fed to the
classifier head.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ParameterError
from .tensor import Tensor

Parameters = dict[str, Tensor]

MAGIC = b"CLKD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden_sizes: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(d) for d in self.hidden_sizes))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("mlp", "convnet"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ParameterError(f"invalid input_shape {self.input_shape}")
        if any(h < 1 for h in self.hidden_sizes + self.channels):
            raise ParameterError("all layer sizes must be >= 1")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ParameterError(f"convnet input_shape must be (C, H, W), got {self.input_shape}")
            if not 1 <= len(self.channels) <= 4:
                raise ParameterError(f"convnet needs 1 to 4 conv layers, got {len(self.channels)}")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ParameterError(f"kernel_size must be odd and positive, got {self.kernel_size}")

    @property
    def feature_dim(self) -> int:
        if self.kind == "mlp":
            return self.hidden_sizes[-1] if self.hidden_sizes else int(np.prod(self.input_shape))
        return self.channels[-1]

    def tap_ids(self) -> tuple[str, ...]:
        if self.kind == "mlp":
            return tuple(f"h{i}" for i in range(len(self.hidden_sizes))) + ("penultimate",)
        return tuple(f"conv{i}" for i in range(len(self.channels))) + ("penultimate",)


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(prefix, weight shape, fan_in) for every layer, in forward order."""
    out = []
    if spec.kind == "mlp":
        sizes = [int(np.prod(spec.input_shape)), *spec.hidden_sizes, spec.num_classes]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"fc{i}", (a, b), a))
    else:
        k = spec.kernel_size
        chans = [spec.input_shape[0], *spec.channels]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            out.append((f"conv{i}", (b, a, k, k), a * k * k))
        out.append(("head", (spec.channels[-1], spec.num_classes), spec.channels[-1]))
    return out


def init(spec: ModelSpec, rng: np.random.Generator | None = None) -> Parameters:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    params: Parameters = {}
    for prefix, shape, fan_in in _layer_shapes(spec):
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        bias_len = shape[0] if prefix.startswith("conv") else shape[1]
        params[f"{prefix}.weight"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.bias"] = Tensor(np.zeros(bias_len), requires_grad=True)
    return params


def forward(spec: ModelSpec, params: Parameters, x, taps: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    taps = tuple(taps)
    known = spec.tap_ids()
    for t in taps:
        if t not in known:
            raise ParameterError(f"unknown feature tap {t!r}; available: {known}")
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"expected input of shape (B, {', '.join(map(str, spec.input_shape))}), got {x.shape}")

    captured: dict[str, Tensor] = {}
    if spec.kind == "mlp":
        h = T.reshape(x, (x.shape[0], -1)) if x.ndim != 2 else x
        n_hidden = len(spec.hidden_sizes)
        for i in range(n_hidden):
            h = T.relu(T.matmul(h, params[f"fc{i}.weight"]) + params[f"fc{i}.bias"])
            captured[f"h{i}"] = h
        captured["penultimate"] = h
        logits = T.matmul(h, params[f"fc{n_hidden}.weight"]) + params[f"fc{n_hidden}.bias"]
    else:
        h = x
        pad = spec.kernel_size // 2
        for i in range(len(spec.channels)):
            h = T.relu(T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], padding=pad))
            captured[f"conv{i}"] = h
        pooled = T.global_avg_pool(h)
        captured["penultimate"] = pooled
        logits = T.matmul(pooled, params["head.weight"]) + params["head.bias"]
    return logits, {t: captured[t] for t in taps}


def param_count(params: Parameters) -> int:
    return int(sum(t.data.size for t in params.values()))


def freeze(params: Parameters) -> Parameters:
    """Copy of ``params`` that never requires grad."""
    return {k: Tensor(v.data, requires_grad=False) for k, v in params.items()}


def clone(params: Parameters, requires_grad: bool = True) -> Parameters:
    return {k: Tensor(v.data, requires_grad=requires_grad) for k, v in params.items()}


# --------------------------------------------------------------------------
# checkpoint format (all integers and payloads little-endian):
#   b"CLKD" | u32 version | u32 entry count
#   per entry: u32 name length | utf-8 name | u32 rank | u64 dims[rank] | f64 payload


def dumps(params: Parameters) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes, requires_grad: bool = False) -> Parameters:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    params: Parameters = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        start = pos
        payload = np.frombuffer(take(8 * n, f"payload of {name!r}"), dtype="<f8").reshape(dims)
        if not np.all(np.isfinite(payload)):
            raise FormatError(f"non-finite values in {name!r}", start)
        params[name] = Tensor(payload.astype(np.float64), requires_grad=requires_grad)
    if pos != len(view):
        raise FormatError("trailing bytes after last entry", pos)
    return params


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(params: Parameters, path: str | os.PathLike) -> None:
    atomic_write(path, dumps(params))


def load(path: str | os.PathLike, requires_grad: bool = False) -> Parameters:
    return loads(Path(path).read_bytes(), requires_grad=requires_grad)


@dataclass
class FeatureTap:
    layer: str
    value: Tensor = field(repr=False)
