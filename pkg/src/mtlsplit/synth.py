"""Procedural factor-of-variation image dataset with salt-and-pepper corruption."""

from __future__ import annotations

import colorsys
import io
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, FormatError, UnsupportedFactorError
from .model import canonical_json
from .rng import Rng

DATASET_MAGIC = b"MTLD"
DATASET_VERSION = 1

KNOWN_FACTORS = ("background-hue", "object-hue", "object-shape", "object-size")
MAX_SHAPES = 4
MAX_SIZES = 8
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
DEFAULT_OBJECT = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class FactorSpec:
    image_size: tuple[int, int] = (16, 16)
    factors: tuple[tuple[str, int], ...] = (("object-hue", 6), ("object-shape", 4), ("object-size", 4))
    samples_per_combination: int = 20
    noise_fraction: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "factors", tuple((str(n), int(v)) for n, v in self.factors))

    @property
    def n_combinations(self) -> int:
        return math.prod(n for _, n in self.factors)

    @property
    def size(self) -> int:
        return self.samples_per_combination * self.n_combinations

    @property
    def tasks(self) -> tuple[tuple[str, int], ...]:
        return self.factors

    def validate(self) -> None:
        w, h = self.image_size
        if w < 8 or h < 8:
            raise ConfigError(f"image size must be at least 8x8, got {w}x{h}")
        if self.samples_per_combination <= 0:
            raise ConfigError("samples_per_combination must be positive")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigError(f"noise_fraction must lie in [0, 1], got {self.noise_fraction}")
        names = [n for n, _ in self.factors]
        if not names:
            raise ConfigError("at least one factor is required")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate factors: {names}")
        for name, n in self.factors:
            if name not in KNOWN_FACTORS:
                raise UnsupportedFactorError(f"unknown factor {name!r}; expected one of {KNOWN_FACTORS}")
            if n <= 0:
                raise ConfigError(f"factor {name!r} needs at least one value")
        counts = dict(self.factors)
        if counts.get("object-shape", 0) > MAX_SHAPES:
            raise UnsupportedFactorError(f"at most {MAX_SHAPES} shapes are supported, got {counts['object-shape']}")
        if counts.get("object-size", 0) > MAX_SIZES:
            raise UnsupportedFactorError(f"at most {MAX_SIZES} sizes are supported, got {counts['object-size']}")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "factors": [list(f) for f in self.factors],
            "samples_per_combination": self.samples_per_combination,
            "noise_fraction": self.noise_fraction,
        }

    @classmethod
    def from_dict(cls, d) -> "FactorSpec":
        try:
            return cls(
                image_size=tuple(d["image_size"]),
                factors=tuple(tuple(f) for f in d["factors"]),
                samples_per_combination=int(d["samples_per_combination"]),
                noise_fraction=float(d.get("noise_fraction", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from exc


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (w, h, 3) float32 in [0, 1]
    labels: tuple[int, ...]


@dataclass
class Dataset:
    spec: FactorSpec
    images: np.ndarray  # (K, w, h, 3) float32
    labels: np.ndarray  # (K, N) int64
    task_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.task_names:
            self.task_names = tuple(n for n, _ in self.spec.factors)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], tuple(int(v) for v in self.labels[i]))

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.spec, self.images[idx], self.labels[idx], self.task_names)

    def class_counts(self) -> list[list[int]]:
        return [np.bincount(self.labels[:, j], minlength=n).tolist()
                for j, (_, n) in enumerate(self.spec.factors)]


def hue_rgb(index: int, n_values: int) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb(index / n_values, 1.0, 1.0)


def size_radius(index: int, n_values: int, extent: int) -> float:
    if n_values == 1:
        return 0.3 * extent
    return extent * (0.18 + 0.27 * index / (n_values - 1))


def render(spec: FactorSpec, values: Sequence[int]) -> np.ndarray:
    """Clean image for one factor combination (values ordered as ``spec.factors``)."""
    w, h = spec.image_size
    by_name = {name: (v, n) for (name, n), v in zip(spec.factors, values)}
    bg = hue_rgb(*by_name["background-hue"]) if "background-hue" in by_name else DEFAULT_BACKGROUND
    fg = hue_rgb(*by_name["object-hue"]) if "object-hue" in by_name else DEFAULT_OBJECT
    kind = by_name["object-shape"][0] if "object-shape" in by_name else _kernels.SHAPE_SQUARE
    radius = size_radius(*by_name["object-size"], min(w, h)) if "object-size" in by_name else 0.3 * min(w, h)
    mask = _kernels.raster_mask(int(kind), int(w), int(h), float(radius))
    img = np.empty((w, h, 3), dtype=np.float32)
    img[...] = np.asarray(bg, dtype=np.float32)
    img[mask] = np.asarray(fg, dtype=np.float32)
    return img


def noise_count(fraction: float, w: int, h: int) -> int:
    return int(math.floor(fraction * w * h + 0.5))


def add_salt_pepper(img: LabeledImage, fraction: float, seed: int) -> LabeledImage:
    """Set exactly ``round(fraction*w*h)`` distinct pixels to all-0 or all-1."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"noise fraction must lie in [0, 1], got {fraction}")
    w, h = img.pixels.shape[:2]
    k = noise_count(fraction, w, h)
    out = img.pixels.copy()
    if k:
        rng = Rng(seed)
        pos = rng.choice_without_replacement(w * h, k)
        salt = rng.bits(k).astype(np.float32)
        flat = out.reshape(w * h, -1)
        flat[pos] = salt[:, None]
    return LabeledImage(out, tuple(img.labels))


def generate(spec: FactorSpec, seed: int) -> Dataset:
    spec.validate()
    w, h = spec.image_size
    combos = list(itertools.product(*(range(n) for _, n in spec.factors)))
    k_total = spec.size
    images = np.empty((k_total, w, h, 3), dtype=np.float32)
    labels = np.empty((k_total, len(spec.factors)), dtype=np.int64)
    noise_seeds = Rng.for_purpose(seed, "noise").next_u64(k_total)
    i = 0
    for combo in combos:
        clean = render(spec, combo)
        for _ in range(spec.samples_per_combination):
            if spec.noise_fraction > 0:
                images[i] = add_salt_pepper(LabeledImage(clean, combo), spec.noise_fraction,
                                            int(noise_seeds[i])).pixels
            else:
                images[i] = clean
            labels[i] = combo
            i += 1
    return Dataset(spec, images, labels)


def split_train_test(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    n_train = int(math.floor(ratio * n + 0.5))
    if n_train == 0 or n_train == n:
        raise ContractError(f"ratio {ratio} on {n} samples leaves one side empty")
    perm = Rng.for_purpose(seed, "split").permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


# ---------------------------------------------------------------------------
# dataset file


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    js = canonical_json(ds.spec.to_dict())
    buf.write(struct.pack("<I", len(js)))
    buf.write(js)
    buf.write(struct.pack("<I", len(ds)))
    labels = ds.labels.astype("<u2")
    pixels = ds.images.astype("<f4")
    for i in range(len(ds)):
        buf.write(labels[i].tobytes())
        buf.write(pixels[i].tobytes())
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if len(data) < 10:
        raise FormatError("dataset file truncated")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    (jlen,) = struct.unpack_from("<I", data, 6)
    try:
        spec = FactorSpec.from_dict(json.loads(data[10:10 + jlen].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad dataset header: {exc}") from exc
    pos = 10 + jlen
    (k,) = struct.unpack_from("<I", data, pos)
    pos += 4
    n = len(spec.factors)
    w, h = spec.image_size
    rec = np.dtype([("labels", "<u2", (n,)), ("pixels", "<f4", (w, h, 3))])
    if len(data) - pos != k * rec.itemsize:
        raise FormatError(f"dataset body holds {len(data) - pos} bytes, expected {k * rec.itemsize}")
    arr = np.frombuffer(data, dtype=rec, count=k, offset=pos)
    return Dataset(spec, arr["pixels"].astype(np.float32), arr["labels"].astype(np.int64))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
