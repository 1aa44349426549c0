"""Shared-backbone multi-head MLP and its binary checkpoint format."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .rng import Rng
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"MTLM"
CHECKPOINT_VERSION = 1

PART_FULL = "full"
PART_BACKBONE = "backbone"
PART_HEADS = "heads"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (16, 16, 3)
    backbone_widths: tuple[int, ...] = (128,)
    feature_len: int = 64
    head_hidden_width: int = 32
    tasks: tuple[tuple[str, int], ...] = (("hue", 6), ("shape", 4), ("size", 4))

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "backbone_widths", tuple(int(v) for v in self.backbone_widths))
        object.__setattr__(self, "tasks", tuple((str(n), int(c)) for n, c in self.tasks))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ConfigError(f"input_shape must be three positive ints, got {self.input_shape}")
        widths = self.backbone_widths + (self.feature_len, self.head_hidden_width)
        if any(w <= 0 for w in widths):
            raise ConfigError(f"all widths must be positive: {widths}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if any(c <= 0 for _, c in self.tasks):
            raise ConfigError(f"n_classes must be positive: {self.tasks}")
        names = [n for n, _ in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")

    @property
    def input_len(self) -> int:
        return math.prod(self.input_shape)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [list(t) for t in self.tasks]
        d["input_shape"] = list(self.input_shape)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        try:
            return cls(
                input_shape=tuple(d["input_shape"]),
                backbone_widths=tuple(d["backbone_widths"]),
                feature_len=int(d["feature_len"]),
                head_hidden_width=int(d["head_hidden_width"]),
                tasks=tuple(tuple(t) for t in d["tasks"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def with_tasks(self, tasks: Sequence[tuple[str, int]]) -> "ModelConfig":
        return ModelConfig(self.input_shape, self.backbone_widths, self.feature_len,
                           self.head_hidden_width, tuple(tasks))


def backbone_layer_dims(cfg: ModelConfig) -> list[tuple[int, int]]:
    dims = [cfg.input_len, *cfg.backbone_widths, cfg.feature_len]
    return list(zip(dims[:-1], dims[1:]))


def head_param_names(j: int) -> list[str]:
    return [f"head.{j}.fc1.weight", f"head.{j}.fc1.bias", f"head.{j}.fc2.weight", f"head.{j}.fc2.bias"]


def backbone_param_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(len(backbone_layer_dims(cfg))):
        names += [f"backbone.{i}.weight", f"backbone.{i}.bias"]
    return names


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, fan_in * fan_out).astype(np.float32).reshape(fan_in, fan_out)


def _init_head(rng: Rng, cfg: ModelConfig, n_classes: int) -> list[np.ndarray]:
    hw = cfg.head_hidden_width
    return [
        _glorot(rng, cfg.feature_len, hw),
        np.zeros(hw, np.float32),
        _glorot(rng, hw, n_classes),
        np.zeros(n_classes, np.float32),
    ]


@dataclass
class MtlModel:
    """Backbone parameters plus one parameter group per task head.

    ``part`` records which slice is held: an SC edge keeps only the
    backbone, an SC server only the heads.
    """

    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    part: str = PART_FULL

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "MtlModel":
        rng = Rng.for_purpose(seed, "init")
        params: dict[str, np.ndarray] = {}
        for i, (fi, fo) in enumerate(backbone_layer_dims(config)):
            params[f"backbone.{i}.weight"] = _glorot(rng, fi, fo)
            params[f"backbone.{i}.bias"] = np.zeros(fo, np.float32)
        for j, (_, n_classes) in enumerate(config.tasks):
            for name, arr in zip(head_param_names(j), _init_head(rng, config, n_classes)):
                params[name] = arr
        return cls(config, params)

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    @property
    def feature_len(self) -> int:
        return self.config.feature_len

    def backbone_names(self) -> list[str]:
        return backbone_param_names(self.config)

    def head_names(self, j: int) -> list[str]:
        return head_param_names(j)

    def copy(self) -> "MtlModel":
        return MtlModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.part)

    def param_count(self, which: str = PART_FULL) -> int:
        if which == PART_BACKBONE:
            names = self.backbone_names()
        elif which == PART_HEADS:
            names = [n for j in range(self.n_tasks) for n in self.head_names(j)]
        else:
            names = list(self.params)
        return sum(self.params[n].size for n in names)

    def split(self) -> tuple["MtlModel", "MtlModel"]:
        """(edge slice holding only the backbone, server slice holding only the heads)."""
        bb = set(self.backbone_names())
        edge = {k: v.copy() for k, v in self.params.items() if k in bb}
        server = {k: v.copy() for k, v in self.params.items() if k not in bb}
        return MtlModel(self.config, edge, PART_BACKBONE), MtlModel(self.config, server, PART_HEADS)

    def add_task(self, name: str, n_classes: int, seed: int) -> "MtlModel":
        """New model with a freshly initialized head appended."""
        cfg = self.config.with_tasks(self.config.tasks + ((name, n_classes),))
        rng = Rng.for_purpose(seed, f"init-head:{name}")
        params = {k: v.copy() for k, v in self.params.items()}
        for pname, arr in zip(head_param_names(cfg.n_tasks - 1), _init_head(rng, cfg, n_classes)):
            params[pname] = arr
        return MtlModel(cfg, params, self.part)

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Parameters as tensors; watched leaves when a tape is given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v, k) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# forward passes


def _as_batch(model: MtlModel, x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    shape = model.config.input_shape
    if x.shape == shape:
        return T.reshape(x, (1, model.config.input_len)), False
    if x.data.ndim == 4 and x.shape[1:] == shape:
        return T.flatten(x, batched=True), True
    raise DimensionError(f"input shape {x.shape} does not match model input {shape}")


def _get(model: MtlModel, params, name: str) -> Tensor:
    if params is not None:
        return params[name]
    try:
        return Tensor(model.params[name])
    except KeyError:
        raise KeyError(f"parameter {name!r} not held by this {model.part} model") from None


def backbone_forward(model: MtlModel, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Shared feature ``Z_b``: flattened input through linear+relu layers."""
    h, batched = _as_batch(model, x)
    for i in range(len(backbone_layer_dims(model.config))):
        h = T.matmul(h, _get(model, params, f"backbone.{i}.weight"))
        h = T.relu(T.add_bias(h, _get(model, params, f"backbone.{i}.bias")))
    return h if batched else T.reshape(h, (model.feature_len,))


def head_forward(model: MtlModel, j: int, z, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Raw logits of head ``j``: linear, relu, linear."""
    if not 0 <= j < model.n_tasks:
        raise IndexError(f"task index {j} out of range for {model.n_tasks} tasks")
    z = T.as_tensor(z)
    if z.shape[-1] != model.feature_len or z.data.ndim not in (1, 2):
        raise DimensionError(f"feature shape {z.shape} does not match feature_len {model.feature_len}")
    single = z.data.ndim == 1
    h = T.reshape(z, (1, model.feature_len)) if single else z
    w1, b1, w2, b2 = (_get(model, params, n) for n in head_param_names(j))
    h = T.relu(T.add_bias(T.matmul(h, w1), b1))
    out = T.add_bias(T.matmul(h, w2), b2)
    return T.reshape(out, (out.shape[1],)) if single else out


def predict_all(model: MtlModel, x, params: Mapping[str, Tensor] | None = None) -> list[Tensor]:
    z = backbone_forward(model, x, params)
    return [head_forward(model, j, z, params) for j in range(model.n_tasks)]


def flatten_feature(z) -> np.ndarray:
    return np.ascontiguousarray(T.as_tensor(z).data, dtype=np.float32).reshape(-1)


def unflatten_feature(flat, shape: Sequence[int]) -> Tensor:
    return Tensor(np.asarray(flat, dtype=np.float32).reshape(tuple(shape)))


# ---------------------------------------------------------------------------
# checkpoint file


def checkpoint_bytes(model: MtlModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    header = model.config.to_dict()
    header["part"] = model.part
    cfg = canonical_json(header)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _take(data: bytes, pos: int, n: int) -> bytes:
    if pos + n > len(data):
        raise FormatError(f"checkpoint truncated at byte {pos}")
    return data[pos:pos + n]


def model_from_bytes(data: bytes) -> MtlModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", _take(data, 4, 2))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", _take(data, 6, 4))
    try:
        header = json.loads(_take(data, 10, clen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    part = header.pop("part", PART_FULL)
    cfg = ModelConfig.from_dict(header)
    pos = 10 + clen
    params: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<H", _take(data, pos, 2))
        name = _take(data, pos + 2, nlen).decode("utf-8")
        pos += 2 + nlen
        (ndim,) = struct.unpack("<B", _take(data, pos, 1))
        dims = struct.unpack(f"<{ndim}I", _take(data, pos + 1, 4 * ndim))
        pos += 1 + 4 * ndim
        count = math.prod(dims)
        raw = _take(data, pos, 4 * count)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        pos += 4 * count
    return MtlModel(cfg, params, part)


def save_checkpoint(model: MtlModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> MtlModel:
    return model_from_bytes(Path(path).read_bytes())
