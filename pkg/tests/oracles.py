"""Independent reference implementations used as test oracles.

Nothing here calls into the tape machinery; forward passes are written out
with explicit loops or plain float64 numpy.
"""

from __future__ import annotations

import math

import numpy as np

from mtlsplit.model import MtlModel, ModelConfig, backbone_layer_dims, head_param_names
from mtlsplit.rng import Rng


def loop_matmul(a, b) -> np.ndarray:
    """Triple loop in float64, one rounding to float32 at the end."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out.astype(np.float32)


def loop_linear_relu(x32: np.ndarray, w: np.ndarray, b: np.ndarray, relu: bool) -> np.ndarray:
    h = loop_matmul(x32, w) + b
    return np.maximum(h, np.float32(0)) if relu else h


def loop_predict(model: MtlModel, x: np.ndarray) -> list[np.ndarray]:
    """Whole-model forward with loop matmuls, batch of inputs."""
    cfg = model.config
    h = np.asarray(x, dtype=np.float32).reshape(x.shape[0], -1)
    for i in range(len(backbone_layer_dims(cfg))):
        h = loop_linear_relu(h, model.params[f"backbone.{i}.weight"], model.params[f"backbone.{i}.bias"], True)
    out = []
    for j in range(cfg.n_tasks):
        w1, b1, w2, b2 = (model.params[n] for n in head_param_names(j))
        g = loop_linear_relu(h, w1, b1, True)
        out.append(loop_linear_relu(g, w2, b2, False))
    return out


def direct_xent(logits, label) -> float:
    """-log(exp(z_l) / sum exp(z_k)) at float64, no stabilization."""
    z = np.asarray(logits, dtype=np.float64)
    return -math.log(math.exp(z[label]) / sum(math.exp(v) for v in z))


def f64_total_loss(cfg: ModelConfig, params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray,
                   pattern: list | None = None) -> float:
    """Sum over tasks of batch-mean cross-entropy, all in float64 numpy."""
    h = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    masks = []
    for i in range(len(backbone_layer_dims(cfg))):
        z = h @ params[f"backbone.{i}.weight"] + params[f"backbone.{i}.bias"]
        masks.append(z > 0)
        h = np.maximum(z, 0.0)
    total = 0.0
    rows = np.arange(x.shape[0])
    for j in range(cfg.n_tasks):
        w1, b1, w2, b2 = (params[n] for n in head_param_names(j))
        z = h @ w1 + b1
        masks.append(z > 0)
        logits = np.maximum(z, 0.0) @ w2 + b2
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        total += float(np.mean(lse - logits[rows, y[:, j]]))
    if pattern is not None:
        pattern.append(np.concatenate([k.ravel() for k in masks]).tobytes())
    return total


def smooth_random_model(seed: int, cfg: ModelConfig, batch: int, margin: float = 5e-3):
    """Random model and batch whose relu inputs all sit at least ``margin`` from zero.

    Biases of offending units are redrawn, so central differences with a step
    well below the margin never straddle a relu kink.
    """
    rng = Rng(seed)
    model = MtlModel.init(cfg, seed)
    x = rng.random(batch * cfg.input_len).reshape((batch,) + cfg.input_shape).astype(np.float32)
    y = np.stack([rng.integers(c, batch) for _, c in cfg.tasks], axis=1)

    def settle(h, wname, bname):
        w = model.params[wname].astype(np.float64)
        b = rng.uniform(-0.2, 0.2, w.shape[1])
        for _ in range(1000):
            z = h @ w + b
            bad = (np.abs(z) < margin).any(axis=0)
            if not bad.any():
                break
            b[bad] = rng.uniform(-0.2, 0.2, int(bad.sum()))
        else:
            raise RuntimeError("could not clear relu kinks")
        model.params[bname] = b.astype(np.float32)
        return np.maximum(h @ w + model.params[bname].astype(np.float64), 0.0)

    h = x.reshape(batch, -1).astype(np.float64)
    for i in range(len(backbone_layer_dims(cfg))):
        h = settle(h, f"backbone.{i}.weight", f"backbone.{i}.bias")
    for j in range(cfg.n_tasks):
        w1, b1, w2, b2 = head_param_names(j)
        settle(h, w1, b1)
        model.params[b2] = rng.uniform(-0.2, 0.2, model.params[b2].size).astype(np.float32)
    return model, x, y


def random_desk_config(seed: int) -> ModelConfig:
    """Small random architecture, always under 5,000 parameters."""
    rng = Rng(seed ^ 0xC0FFEE)
    side = 2 + int(rng.integers(3, 1)[0])
    n_tasks = 1 + int(rng.integers(3, 1)[0])
    widths = tuple(int(v) for v in 4 + rng.integers(20, 1 + int(rng.integers(2, 1)[0])))
    cfg = ModelConfig(
        input_shape=(side, side, 3),
        backbone_widths=widths,
        feature_len=4 + int(rng.integers(12, 1)[0]),
        head_hidden_width=3 + int(rng.integers(8, 1)[0]),
        tasks=tuple((f"t{j}", 2 + int(rng.integers(4, 1)[0])) for j in range(n_tasks)),
    )
    return cfg


def flatten_params(model: MtlModel) -> tuple[list[str], np.ndarray]:
    names = list(model.params)
    return names, np.concatenate([model.params[n].ravel().astype(np.float64) for n in names])


def unflatten_params(model: MtlModel, names, flat: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in names:
        shape = model.params[n].shape
        size = int(np.prod(shape))
        out[n] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out
