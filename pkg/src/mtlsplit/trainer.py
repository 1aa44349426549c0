"""Joint multi-task training, single-task baselines and two-rate fine-tuning."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .model import MtlModel, ModelConfig, canonical_json, head_forward, backbone_forward, predict_all
from .rng import Rng
from .synth import Dataset
from .tensor import Tape

log = logging.getLogger(__name__)

SGD = "sgd"
ADAMW = "adamw"


@dataclass
class LossReport:
    per_task: list[float]
    total: float

    @classmethod
    def from_values(cls, per_task: Sequence[float]) -> "LossReport":
        vals = [float(v) for v in per_task]
        total = 0.0
        for v in vals:
            total += v
        return cls(vals, total)


@dataclass
class OptimizerState:
    kind: str = ADAMW
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in (SGD, ADAMW):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, empty moment buffers."""
        return OptimizerState(self.kind, self.learning_rate, self.weight_decay,
                              self.beta1, self.beta2, self.eps)

    def apply(self, params: dict[str, np.ndarray], grads, names: Sequence[str] | None = None) -> None:
        """Update ``params`` in place (by key) from a gradient map."""
        names = list(params) if names is None else list(names)
        lr = np.float32(self.learning_rate)
        if self.kind == SGD:
            for n in names:
                g = _arr(grads[n])
                params[n] = (params[n] - lr * g).astype(np.float32)
            return
        self.step += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 - self.beta1 ** self.step)
        c2 = np.float32(1.0 - self.beta2 ** self.step)
        decay = np.float32(self.learning_rate * self.weight_decay)
        eps = np.float32(self.eps)
        one = np.float32(1.0)
        for n in names:
            g = _arr(grads[n])
            p = params[n]
            m = self.m.get(n)
            v = self.v.get(n)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = b1 * m + (one - b1) * g
            v = b2 * v + (one - b2) * (g * g)
            self.m[n], self.v[n] = m, v
            p = p - decay * p
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
            params[n] = p.astype(np.float32)


@dataclass
class FinetuneConfig:
    alpha: float
    eta: float = 0.0
    kind: str = SGD
    weight_decay: float = 0.0
    _head_opt: OptimizerState | None = field(default=None, init=False, repr=False)
    _backbone_opt: OptimizerState | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.alpha < 0 or self.eta < 0:
            raise ConfigError(f"alpha and eta must be non-negative, got {self.alpha}, {self.eta}")
        if self.kind not in (SGD, ADAMW):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")


def _arr(g) -> np.ndarray:
    return g.data if isinstance(g, T.Tensor) else np.asarray(g)


def _batch_arrays(model: MtlModel, batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, Dataset):
        images, labels = batch.images, batch.labels
    else:
        images, labels = batch
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels.reshape(-1, 1) if model.n_tasks == 1 else labels.reshape(1, -1)
    if labels.shape[1] != model.n_tasks:
        raise ContractError(f"each sample needs {model.n_tasks} labels, got {labels.shape[1]}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    return images, labels


def task_losses(model: MtlModel, images, labels, params=None) -> tuple[list[T.Tensor], T.Tensor]:
    """Per-task batch-mean cross-entropies and their sum, on ``params``' tape if any."""
    z = backbone_forward(model, images, params)
    losses = []
    for j in range(model.n_tasks):
        logits = head_forward(model, j, z, params)
        losses.append(T.mean_batch(T.softmax_cross_entropy(logits, labels[:, j])))
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return losses, total


def _check_finite(losses: Sequence[T.Tensor]) -> None:
    for j, l in enumerate(losses):
        if not np.isfinite(l.data).all():
            raise NumericError(f"non-finite loss for task {j}", task_index=j)


def total_loss(model: MtlModel, batch) -> LossReport:
    images, labels = _batch_arrays(model, batch)
    losses, _ = task_losses(model, images, labels)
    return LossReport.from_values([l.item() for l in losses])


def train_step(model: MtlModel, batch, opt: OptimizerState) -> LossReport:
    """One forward, one backward of the summed loss, one update of every parameter."""
    images, labels = _batch_arrays(model, batch)
    tape = Tape()
    params = model.bind(tape)
    losses, total = task_losses(model, images, labels, params)
    _check_finite(losses)
    grads = T.backward(tape, total)
    opt.apply(model.params, grads)
    return LossReport.from_values([l.item() for l in losses])


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = Rng.for_purpose(seed, f"shuffle:{epoch}").permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def fit(model: MtlModel, data: Dataset, epochs: int, opt: OptimizerState, *,
        batch_size: int = 64, seed: int = 0, step_fn=None) -> list[list[float]]:
    """Run ``epochs`` passes; returns the per-epoch mean of each task's step losses."""
    step_fn = step_fn or (lambda b: train_step(model, b, opt))
    history = []
    for epoch in range(epochs):
        sums = np.zeros(model.n_tasks)
        count = 0
        for idx in _epoch_batches(len(data), batch_size, seed, epoch):
            rep = step_fn((data.images[idx], data.labels[idx]))
            sums += rep.per_task
            count += 1
        history.append((sums / max(count, 1)).tolist())
        log.debug("epoch %d losses %s", epoch, history[-1])
    return history


def task_view(data: Dataset, j: int) -> Dataset:
    """The dataset with only task ``j``'s labels."""
    return Dataset(data.spec, data.images, data.labels[:, j:j + 1], (data.task_names[j],))


def train_mtl(config: ModelConfig, data: Dataset, epochs: int, opt: OptimizerState, *,
              seed: int, batch_size: int = 64) -> tuple[MtlModel, list[list[float]]]:
    model = MtlModel.init(config, seed)
    history = fit(model, data, epochs, opt.fresh(), batch_size=batch_size, seed=seed)
    return model, history


def train_stl(config: ModelConfig, j: int, data: Dataset, epochs: int, opt: OptimizerState, *,
              seed: int, batch_size: int = 64) -> tuple[MtlModel, list[list[float]]]:
    """Independent backbone plus one head, trained on task ``j`` alone."""
    if not 0 <= j < data.n_tasks:
        raise ContractError(f"task {j} not present in data with {data.n_tasks} tasks")
    cfg = config.with_tasks([config.tasks[j]])
    return train_mtl(cfg, task_view(data, j), epochs, opt, seed=seed, batch_size=batch_size)


def finetune_step(model: MtlModel, batch, cfg: FinetuneConfig) -> LossReport:
    """Heads step on their own task loss at ``alpha``; backbone on the total at ``eta``.

    All gradients are taken before any parameter moves.
    """
    images, labels = _batch_arrays(model, batch)
    tape = Tape()
    params = model.bind(tape)
    losses, total = task_losses(model, images, labels, params)
    _check_finite(losses)
    head_grads = {}
    for j, l in enumerate(losses):
        g = T.backward(tape, l)
        for n in model.head_names(j):
            head_grads[n] = g[n].data
    g_total = T.backward(tape, total)
    bb_grads = {n: g_total[n].data for n in model.backbone_names()}
    for name, g in {**head_grads, **bb_grads}.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")

    if cfg.kind == SGD:
        a, e = np.float32(cfg.alpha), np.float32(cfg.eta)
        for n, g in head_grads.items():
            model.params[n] = (model.params[n] - a * g).astype(np.float32)
        for n, g in bb_grads.items():
            model.params[n] = (model.params[n] - e * g).astype(np.float32)
    else:
        if cfg._head_opt is None:
            cfg._head_opt = OptimizerState(ADAMW, cfg.alpha, cfg.weight_decay)
            cfg._backbone_opt = OptimizerState(ADAMW, cfg.eta, cfg.weight_decay)
        cfg._head_opt.apply(model.params, head_grads, list(head_grads))
        cfg._backbone_opt.apply(model.params, bb_grads, list(bb_grads))
    return LossReport.from_values([l.item() for l in losses])


def finetune(model: MtlModel, data: Dataset, epochs: int, cfg: FinetuneConfig, *,
             batch_size: int = 64, seed: int = 0) -> list[list[float]]:
    return fit(model, data, epochs, None, batch_size=batch_size, seed=seed,
               step_fn=lambda b: finetune_step(model, b, cfg))


def predictions(model: MtlModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """argmax class per task, shape (K, N)."""
    out = np.empty((images.shape[0], model.n_tasks), dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits = predict_all(model, images[start:start + batch_size])
        for j, lg in enumerate(logits):
            out[start:start + batch_size, j] = np.argmax(lg.data, axis=1)
    return out


def evaluate(model: MtlModel, dataset: Dataset, batch_size: int = 256) -> list[float]:
    """Per-task accuracy in percent."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    pred = predictions(model, dataset.images, batch_size)
    correct = (pred == dataset.labels[:, :model.n_tasks]).sum(axis=0)
    return [100.0 * int(c) / len(dataset) for c in correct]


# ---------------------------------------------------------------------------
# metrics documents


def config_digest(run_config: dict) -> str:
    return hashlib.sha256(canonical_json(run_config)).hexdigest()


def metrics_document(*, seed: int, run_config: dict, mode: str, task_names: Sequence[str],
                     history: Sequence[Sequence[float]], accuracies: Sequence[float],
                     wall_clock_seconds: float) -> dict:
    return {
        "seed": seed,
        "config_digest": config_digest(run_config),
        "mode": mode,
        "tasks": list(task_names),
        "epoch_losses": [[float(v) for v in row] for row in history],
        "accuracies": [round(float(a), 2) for a in accuracies],
        "wall_clock_seconds": round(float(wall_clock_seconds), 3),
    }


def render_delta_table(stl: dict, mtl: dict) -> str:
    """STL-vs-MTL accuracy table with signed deltas (+ improved, - regressed)."""
    names = mtl["tasks"]
    stl_acc = dict(zip(stl["tasks"], stl["accuracies"]))
    rows = [("task", "STL", "MTL", "delta")]
    for name, acc in zip(names, mtl["accuracies"]):
        if name not in stl_acc:
            rows.append((name, "-", f"{acc:.2f}", "n/a"))
            continue
        delta = round(acc - stl_acc[name], 2)
        rows.append((name, f"{stl_acc[name]:.2f}", f"{acc:.2f}", f"{delta:+.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False
