"""Dense float tensors with a tape-based reverse-mode autodiff.

The op set is closed: matmul, bias add, relu, reshape/flatten, elementwise
add/mul/scale, sum, batch mean and softmax cross-entropy.  Matrix products
accumulate in float64 and round once to the operand dtype, which keeps
results independent of the BLAS summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float32


class Tensor:
    """An ndarray plus an optional handle into a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Append-only record of the ops applied to watched tensors."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, str] = field(default_factory=dict)
    shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    dtypes: dict[int, np.dtype] = field(default_factory=dict)
    _next_id: int = 0

    def _new_id(self, arr: np.ndarray) -> int:
        nid = self._next_id
        self._next_id += 1
        self.shapes[nid] = arr.shape
        self.dtypes[nid] = arr.dtype
        return nid

    def watch(self, data, name: str) -> Tensor:
        """Register ``data`` as a leaf parameter called ``name``."""
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        nid = self._new_id(arr)
        self.leaves[nid] = name
        return Tensor(arr, self, nid)

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    nid = tape._new_id(out)
    ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    tape.nodes.append(Node(op, ids, nid, backward))
    return Tensor(out, tape, nid)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _mm(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    ad, bd = a.data, b.data
    out = _mm(ad, bd, dtype)

    def backward(g):
        return _mm(g, bd.T, ad.dtype), _mm(ad.T, g, bd.dtype)

    return _record("matmul", out, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``; the only broadcast the op set allows."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias shape mismatch: {x.shape} + {b.shape}")
    out = x.data + b.data
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        gb = g.sum(axis=lead, dtype=np.float64).astype(b.dtype) if lead else g.astype(b.dtype)
        return g, gb

    return _record("add_bias", out, (x, b), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data.dtype.type(0))

    def backward(g):
        return (np.where(pos, g, g.dtype.type(0)),)

    return _record("relu", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _record("reshape", out, (a,), backward)


def flatten(a: Tensor, batched: bool = False) -> Tensor:
    """Row-major flatten; with ``batched`` the leading axis is kept."""
    a = as_tensor(a)
    if batched:
        return reshape(a, (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64))))
    return reshape(a, (a.data.size,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g):
        return g, g

    return _record("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return g * bd, g * ad

    return _record("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    cc = a.dtype.type(c)
    out = a.data * cc

    def backward(g):
        return (g * cc,)

    return _record("scale", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    src = a.shape

    def backward(g):
        return (np.full(src, g, dtype=g.dtype),)

    return _record("sum", out, (a,), backward)


def mean_batch(a: Tensor) -> Tensor:
    """Mean over the leading (batch) axis."""
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[0] == 0:
        raise DimensionError(f"mean over empty batch axis: {a.shape}")
    n = a.shape[0]
    out = (a.data.sum(axis=0, dtype=np.float64) / n).astype(a.dtype)
    src = a.shape

    def backward(g):
        return (np.broadcast_to((g.astype(np.float64) / n).astype(g.dtype), src).copy(),)

    return _record("mean", np.asarray(out), (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """``-log softmax(logits)[label]`` with max subtraction.

    ``logits[C]`` with an int label gives a scalar; ``logits[B, C]`` with B
    labels gives one loss per row.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    if z2.ndim != 2:
        raise DimensionError(f"logits must be 1-D or 2-D, got {z.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = z2.shape[1]
    if lab.shape != (z2.shape[0],):
        raise DimensionError(f"{lab.shape[0]} labels for logits of shape {z.shape}")
    if np.any(lab < 0) or np.any(lab >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes}): {lab.tolist()}")
    rows = np.arange(z2.shape[0])
    # non-finite logits propagate to a NaN loss; callers check and report it
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        shifted = z2.astype(np.float64) - z2.max(axis=1, keepdims=True).astype(np.float64)
        e = np.exp(shifted)
        tot = e.sum(axis=1)
        loss64 = np.log(tot) - shifted[rows, lab]
        probs = e / tot[:, None]
    probs[rows, lab] -= 1.0
    out = loss64.astype(z.dtype)
    if single:
        out = out.reshape(())

    def backward(g):
        g64 = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        gz = (probs * g64).astype(z.dtype)
        return (gz.reshape(z.shape),)

    return _record("softmax_xent", out, (logits,), backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor | int) -> dict[str, Tensor]:
    """Gradients of a scalar node with respect to every leaf on ``tape``.

    Leaves with no path to ``loss`` get zeros.
    """
    loss_id = loss.node_id if isinstance(loss, Tensor) else int(loss)
    if loss_id is None or loss_id not in tape.shapes:
        raise ContractError("loss is not recorded on this tape")
    if tape.shapes[loss_id] not in ((), (1,)):
        raise ContractError(f"backward needs a scalar loss, got shape {tape.shapes[loss_id]}")

    grads: dict[int, np.ndarray] = {
        loss_id: np.ones(tape.shapes[loss_id], dtype=tape.dtypes[loss_id])
    }
    for node in reversed(tape.nodes):
        if node.output > loss_id:
            continue
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for nid, gi in zip(node.inputs, node.backward(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi

    out: dict[str, Tensor] = {}
    for nid, name in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros(tape.shapes[nid], dtype=tape.dtypes[nid])
        out[name] = Tensor(g)
    return out


def finite_difference_grad(f: Callable[[np.ndarray], float], p, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` at ``p``, evaluated in float64."""
    if h <= 0:
        raise ContractError(f"step must be positive, got {h}")
    base = np.array(p, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(base)
    for k in range(base.size):
        orig = base[k]
        base[k] = orig + h
        fp = float(f(base.copy()))
        base[k] = orig - h
        fm = float(f(base.copy()))
        base[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(np.shape(p))
