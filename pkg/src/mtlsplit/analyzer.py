"""Memory and transfer-size arithmetic for LoC / RoC / SC deployments.

Byte counts are exact integers throughout; unit conversion and rounding happen
only when rendering.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .errors import FormatError
from .model import MtlModel, backbone_layer_dims
from .transport import LOC, ROC, SC, ChannelModel, transfer_time_report

UNITS = {
    "si": (1_000_000, "MB", 1_000_000_000, "GB"),
    "binary": (1 << 20, "MiB", 1 << 30, "GiB"),
}


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    param_count: int
    fwd_bwd_activation_bytes: int
    feature_len: int
    bytes_per_param: int = 4

    def __post_init__(self):
        for f in ("param_count", "fwd_bwd_activation_bytes", "feature_len", "bytes_per_param"):
            if getattr(self, f) < 0:
                raise FormatError(f"descriptor field {f!r} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDescriptor":
        if not isinstance(d, dict):
            raise FormatError("descriptor must be a JSON object")
        fields = {"name": str, "param_count": int, "fwd_bwd_activation_bytes": int, "feature_len": int}
        vals = {}
        for key, typ in fields.items():
            if key not in d:
                raise FormatError(f"descriptor missing field {key!r}")
            v = d[key]
            if typ is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise FormatError(f"descriptor field {key!r} must be an integer, got {v!r}")
            if typ is str and not isinstance(v, str):
                raise FormatError(f"descriptor field {key!r} must be a string, got {v!r}")
            vals[key] = v
        return cls(**vals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("bytes_per_param")
        return d


def load_descriptor(path: str | Path) -> ModelDescriptor:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return ModelDescriptor.from_dict(data)


def reference_descriptors() -> list[ModelDescriptor]:
    """Published backbone sizes (MobileNetV3, EfficientNet) shipped with the package."""
    root = resources.files("mtlsplit") / "descriptors"
    out = []
    for name in ("mobilenetv3.json", "efficientnet.json"):
        out.append(ModelDescriptor.from_dict(json.loads((root / name).read_text(encoding="utf-8"))))
    return out


def describe_model(model: MtlModel, name: str = "desk-mlp") -> ModelDescriptor:
    """Backbone descriptor of a live model.

    Activations count every linear and relu output of one input, doubled for
    the backward pass, at 4 bytes each.
    """
    outputs = sum(2 * fo for _, fo in backbone_layer_dims(model.config))
    return ModelDescriptor(
        name=name,
        param_count=model.param_count("backbone"),
        fwd_bwd_activation_bytes=4 * outputs * 2,
        feature_len=model.feature_len,
    )


def params_size_bytes(param_count: int, bytes_per_param: int = 4) -> int:
    return param_count * bytes_per_param


def estimated_model_size(d: ModelDescriptor) -> int:
    return params_size_bytes(d.param_count, d.bytes_per_param) + d.fwd_bwd_activation_bytes


def feature_bytes(d: ModelDescriptor) -> int:
    return 4 * d.feature_len


def loc_memory(d: ModelDescriptor, n_tasks: int) -> int:
    """One independent network per task."""
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be at least 1, got {n_tasks}")
    return n_tasks * estimated_model_size(d)


class MemorySaving(NamedTuple):
    fraction: float
    sc_edge_bytes: int
    loc_bytes: int


def sc_memory_saving(d: ModelDescriptor, n_tasks: int, head_bytes: int = 0,
                     edge_backbones: int = 1) -> MemorySaving:
    """Fraction of LoC memory saved by keeping one shared backbone on the edge.

    LoC holds ``n_tasks`` full networks (backbone plus ``head_bytes`` each); the
    SC edge holds ``edge_backbones`` backbones and no heads.
    """
    if n_tasks < 2:
        raise ValueError("a memory saving needs at least two tasks")
    loc = n_tasks * (estimated_model_size(d) + head_bytes)
    edge = edge_backbones * estimated_model_size(d)
    return MemorySaving(1.0 - edge / loc, edge, loc)


def roc_input_bytes(w: int, h: int, c: int, bytes_per_elem: int = 4) -> int:
    if min(w, h, c) <= 0:
        raise ValueError("input dimensions must be positive")
    return w * h * c * bytes_per_elem


def to_mb(nbytes: int, unit: str) -> float:
    return nbytes / UNITS[unit][0]


def to_gb(nbytes: int, unit: str) -> float:
    return nbytes / UNITS[unit][2]


# ---------------------------------------------------------------------------
# reports


def render_table4(descriptors: Iterable[ModelDescriptor], unit: str = "si") -> list[dict]:
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {sorted(UNITS)}")
    rows = []
    for d in descriptors:
        rows.append({
            "model": d.name,
            "unit": UNITS[unit][1],
            "params_M": f"{d.param_count / 1e6:.2f}",
            "params_size": f"{to_mb(params_size_bytes(d.param_count, d.bytes_per_param), unit):.2f}",
            "fwd_bwd_size": f"{to_mb(d.fwd_bwd_activation_bytes, unit):.2f}",
            "estimated_size": f"{to_mb(estimated_model_size(d), unit):.2f}",
            "zb_elements": str(d.feature_len),
            "zb_size": f"{to_mb(feature_bytes(d), unit):.2f}",
        })
    return rows


TABLE4_COLUMNS = (
    ("model", "Model"),
    ("params_M", "#params (M)"),
    ("params_size", "params size"),
    ("fwd_bwd_size", "fwd/bwd size"),
    ("estimated_size", "estimated size"),
    ("zb_elements", "Z_b elements"),
    ("zb_size", "Z_b size"),
)


def format_rows(rows: Sequence[dict], columns: Sequence[tuple[str, str]]) -> str:
    table = [[title for _, title in columns]] + [[str(r[k]) for k, _ in columns] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


@dataclass
class ParadigmReport:
    model: str
    paradigm: str
    n_tasks: int
    total_model_bytes: int  # resident on the edge device
    per_input_transfer_bytes: int
    n_inputs: int
    latency_seconds: float
    unit: str

    def row(self) -> dict:
        return {
            "model": self.model,
            "paradigm": self.paradigm,
            "n_tasks": self.n_tasks,
            "edge_memory": f"{to_mb(self.total_model_bytes, self.unit):.2f} {UNITS[self.unit][1]}",
            "transfer_per_input": f"{to_mb(self.per_input_transfer_bytes, self.unit):.2f} {UNITS[self.unit][1]}",
            "latency": f"{self.latency_seconds:.2f} s",
        }


PARADIGM_COLUMNS = (
    ("model", "Model"),
    ("paradigm", "Paradigm"),
    ("n_tasks", "N"),
    ("edge_memory", "edge memory"),
    ("transfer_per_input", "transfer/input"),
    ("latency", "payload latency"),
)


def paradigm_reports(d: ModelDescriptor, n_tasks: int, input_shape: Sequence[int], n_inputs: int,
                     ch: ChannelModel, unit: str = "si") -> list[ParadigmReport]:
    w, h, c = input_shape
    roc = transfer_time_report(ROC, n_inputs, input_shape, d.feature_len, ch)
    sc = transfer_time_report(SC, n_inputs, input_shape, d.feature_len, ch)
    return [
        ParadigmReport(d.name, LOC, n_tasks, loc_memory(d, n_tasks), 0, n_inputs, 0.0, unit),
        ParadigmReport(d.name, ROC, n_tasks, 0, roc_input_bytes(w, h, c), n_inputs, roc.request_seconds, unit),
        ParadigmReport(d.name, SC, n_tasks, estimated_model_size(d), feature_bytes(d), n_inputs,
                       sc.request_seconds, unit),
    ]


def overhead_to_reach(target_seconds: float, payload_seconds: float, n_messages: int) -> float:
    """Per-message overhead that would stretch ``payload_seconds`` to ``target_seconds``."""
    if n_messages <= 0:
        return 0.0
    return (target_seconds - payload_seconds) / n_messages
