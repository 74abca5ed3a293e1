"""Small conv classifier with named feature taps, plus checkpoint I/O.

Layout per conv block: 3x3 conv (pad 1) -> ReLU -> 2x2 max pool.  After the
blocks: flatten -> dense(hidden) -> ReLU -> dense(K).  The taps are every
block output followed by the hidden ReLU activation, shallow to deep.

No batch-coupled layers, so a sample's logits do not depend on what else is
in the batch.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, FormatError
from .rng import Rng
from .tensor import Tensor

STAGES = ("init", "tt", "nt", "ml-teacher", "ml-student", "ft")

MAGIC = b"NTML"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_channels: int = 1
    input_size: int = 16
    conv_filters: tuple[int, ...] = (8, 16)
    hidden_dense: int = 32
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.input_channels < 1 or self.hidden_dense < 1:
            raise ConfigError("channels and hidden width must be positive")
        if not self.conv_filters or any(f < 1 for f in self.conv_filters):
            raise ConfigError(f"bad conv filter list {self.conv_filters}")
        side = self.input_size
        for _ in self.conv_filters:
            if side < 2 or side % 2:
                raise ConfigError(f"input size {self.input_size} not divisible by 2 per pool")
            side //= 2

    @property
    def final_side(self) -> int:
        return self.input_size >> len(self.conv_filters)

    @property
    def flat_features(self) -> int:
        return self.conv_filters[-1] * self.final_side ** 2

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every parameter array, in flat-vector order."""
        shapes = []
        c = self.input_channels
        for i, f in enumerate(self.conv_filters):
            shapes.append((f"conv{i}.weight", (f, c, 3, 3)))
            shapes.append((f"conv{i}.bias", (f,)))
            c = f
        shapes.append(("fc0.weight", (self.flat_features, self.hidden_dense)))
        shapes.append(("fc0.bias", (self.hidden_dense,)))
        shapes.append(("fc1.weight", (self.hidden_dense, self.num_classes)))
        shapes.append(("fc1.bias", (self.num_classes,)))
        return shapes

    @property
    def param_count(self) -> int:
        return int(np.sum([np.prod(s) for _, s in self.layer_shapes()]))

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"block{i}" for i in range(len(self.conv_filters))) + ("penultimate",)

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels, "input_size": self.input_size,
                "conv_filters": list(self.conv_filters), "hidden_dense": self.hidden_dense,
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(input_channels=d["input_channels"], input_size=d["input_size"],
                   conv_filters=tuple(d["conv_filters"]), hidden_dense=d["hidden_dense"],
                   num_classes=d["num_classes"])


@dataclass(frozen=True)
class ModelCheckpoint:
    arch: ArchSpec
    params: np.ndarray
    seed: int = 0
    epoch: int = 0
    stage: str = "init"
    tap_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        params = np.array(self.params, dtype="<f8").reshape(-1)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        if params.size != self.arch.param_count:
            raise FormatError(f"{params.size} params, arch expects {self.arch.param_count}")
        if not self.tap_names:
            object.__setattr__(self, "tap_names", self.arch.tap_names)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage tag {self.stage!r}")

    def with_params(self, params: np.ndarray, **meta) -> "ModelCheckpoint":
        return replace(self, params=params, **meta)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Unpack the flat vector into fresh (copied) named tensors."""
        out, pos = {}, 0
        for name, shape in self.arch.layer_shapes():
            n = int(np.prod(shape))
            out[name] = Tensor(self.params[pos:pos + n].reshape(shape), requires_grad)
            pos += n
        return out


def flatten_params(arch: ArchSpec, tensors: dict[str, Tensor]) -> np.ndarray:
    return np.concatenate([tensors[name].data.reshape(-1) for name, _ in arch.layer_shapes()])


def init_model(arch: ArchSpec, rng: Rng) -> ModelCheckpoint:
    """Kaiming-normal weights (std sqrt(2/fan_in)), zero biases."""
    arch.validate()
    chunks = []
    for name, shape in arch.layer_shapes():
        if name.endswith(".bias"):
            chunks.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    params = np.concatenate([c.reshape(-1) for c in chunks])
    return ModelCheckpoint(arch=arch, params=params, seed=rng.seed, epoch=0, stage="init")


def as_batch(images) -> Tensor:
    """u8 or float images (N,C,H,W) -> float tensor scaled to [0,1]."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return Tensor(arr.astype(np.float64) / 255.0)
    return Tensor(arr)


def forward(arch: ArchSpec, weights: dict[str, Tensor], batch) -> tuple[Tensor, list[Tensor]]:
    x = as_batch(batch)
    expect = (arch.input_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"batch shape {x.shape} does not match (N,{expect})")
    taps = []
    h = x
    for i in range(len(arch.conv_filters)):
        b = weights[f"conv{i}.bias"]
        h = tn.conv2d(h, weights[f"conv{i}.weight"], stride=1, pad=1)
        h = tn.add(h, tn.reshape(b, (1, b.shape[0], 1, 1)))
        h = tn.maxpool2d(tn.relu(h), 2)
        taps.append(h)
    h = tn.reshape(h, (h.shape[0], arch.flat_features))
    h = tn.relu(tn.add(tn.matmul(h, weights["fc0.weight"]), weights["fc0.bias"]))
    taps.append(h)
    logits = tn.add(tn.matmul(h, weights["fc1.weight"]), weights["fc1.bias"])
    return logits, taps


def forward_with_taps(model: ModelCheckpoint, batch) -> tuple[Tensor, list[Tensor]]:
    """Logits (N,K) and the taps of ``model`` on ``batch``; no graph is kept."""
    with tn.no_grad():
        return forward(model.arch, model.tensors(), batch)


def predict_logits(model: ModelCheckpoint, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    weights = model.tensors()
    out = []
    with tn.no_grad():
        for s in range(0, len(images), batch_size):
            logits, _ = forward(model.arch, weights, images[s:s + batch_size])
            out.append(logits.data)
    if not out:
        return np.zeros((0, model.arch.num_classes))
    return np.concatenate(out)


# ---------------------------------------------------------------- checkpoint file
#
# little-endian throughout:
#   "NTML" | version u32 | input_channels u32 | input_size u32 | n_blocks u32
#   | filters u32 * n_blocks | hidden u32 | num_classes u32
#   | seed u64 | epoch u32 | stage_len u32 | stage utf-8
#   | n_params u64 | params f64 * n_params

def save_checkpoint(model: ModelCheckpoint, path) -> None:
    a = model.arch
    stage = model.stage.encode("utf-8")
    head = MAGIC + struct.pack("<IIII", FORMAT_VERSION, a.input_channels, a.input_size,
                               len(a.conv_filters))
    head += struct.pack(f"<{len(a.conv_filters)}I", *a.conv_filters)
    head += struct.pack("<IIQII", a.hidden_dense, a.num_classes, model.seed, model.epoch,
                        len(stage))
    head += stage + struct.pack("<Q", model.params.size)
    Path(path).write_bytes(head + model.params.astype("<f8").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, expected_arch: ArchSpec | None = None) -> ModelCheckpoint:
    r = _Reader(Path(path).read_bytes())
    if r.raw(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, channels, size, n_blocks = r.take("<IIII")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n_blocks > 64:
        raise FormatError(f"{path}: implausible block count {n_blocks}")
    filters = r.take(f"<{n_blocks}I")
    hidden, classes, seed, epoch, stage_len = r.take("<IIQII")
    try:
        stage = r.raw(stage_len).decode("utf-8")
        arch = ArchSpec(channels, size, tuple(filters), hidden, classes)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    (n_params,) = r.take("<Q")
    if n_params != arch.param_count:
        raise FormatError(f"{path}: {n_params} params, header arch needs {arch.param_count}")
    payload = r.raw(8 * n_params)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes")
    if expected_arch is not None and expected_arch != arch:
        raise FormatError(f"{path}: architecture {arch} does not match {expected_arch}")
    params = np.frombuffer(payload, dtype="<f8").copy()
    try:
        return ModelCheckpoint(arch=arch, params=params, seed=seed, epoch=epoch, stage=stage)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc
