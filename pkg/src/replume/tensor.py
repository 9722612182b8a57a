"""Dense tensors with a small reverse-mode autodiff tape.

Every differentiable op checks for an active :class:`Tape`; when one is
recording and any input requires a gradient, the op appends a node with its
backward rule. ``Tape.backward`` replays those rules in reverse order.

Model math runs in float32. Ops preserve the dtype of their inputs, so the
same code runs in float64 under :func:`finite_difference_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import LabelError, NumericInputError, RankError, ShapeError

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded when at least one input requires a gradient.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        output.requires_grad = True
        self.nodes.append(Node(inputs, output, fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_TAPES: list[Tape] = []


def _recording(*inputs: Tensor) -> Tape | None:
    if not _TAPES:
        return None
    if any(t.requires_grad for t in inputs):
        return _TAPES[-1]
    return None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reached from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so calling this twice
    without zeroing doubles them.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _out(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data if data.ndim else data.reshape(1)
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = _out(a.data + b.data)
    tape = _recording(a, b)
    if tape:
        sa, sb = a.shape, b.shape
        tape.record((a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def neg(a: Tensor) -> Tensor:
    out = _out(-a.data)
    tape = _recording(a)
    if tape:
        tape.record((a,), out, lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        out = _out(a.data * c)
        tape = _recording(a)
        if tape:
            tape.record((a,), out, lambda g: (g * c,))
        return out
    out = _out(a.data * b.data)
    tape = _recording(a, b)
    if tape:
        ad, bd = a.data, b.data

        def back(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        tape.record((a, b), out, back)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _out(np.matmul(a.data, b.data))
    tape = _recording(a, b)
    if tape:
        ad, bd = a.data, b.data

        def back(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if b.requires_grad:
                if bd.ndim == 2:
                    k, n = bd.shape
                    gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        tape.record((a, b), out, back)
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = _out(np.transpose(a.data, axes))
    tape = _recording(a)
    if tape:
        tape.record((a,), out, lambda g: (np.transpose(g, inv),))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = _out(a.data.reshape(shape))
    tape = _recording(a)
    if tape:
        tape.record((a,), out, lambda g: (g.reshape(old),))
    return out


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    out = _out(np.ascontiguousarray(a.data[key]))
    tape = _recording(a)
    if tape:
        shape, dtype = a.shape, a.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            full[key] = g
            return (full,)

        tape.record((a,), out, back)
    return out


def take(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (axis 0) at integer ``indices`` of any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    out = _out(table.data[idx])
    tape = _recording(table)
    if tape:
        shape, dtype = table.shape, table.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
            return (full,)

        tape.record((table,), out, back)
    return out


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = _out(np.asarray(a.data.sum(), dtype=a.dtype))
    tape = _recording(a)
    if tape:
        shape = a.shape
        tape.record((a,), out, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    return out


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.data.size)


# --------------------------------------------------------------------------
# Neural-network primitives
# --------------------------------------------------------------------------


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{op} received non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y)
    tape = _recording(x)
    if tape:
        tape.record((x,), out, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = _out(y)
    tape = _recording(x)
    if tape:
        p = np.exp(y)
        tape.record((x,), out, lambda g: (g - p * g.sum(axis=axis, keepdims=True),))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gain.data + bias.data)
    tape = _recording(x, gain, bias)
    if tape:
        gd = gain.data

        def back(g):
            lead = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=lead)
            dbias = g.sum(axis=lead)
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return dx, dgain, dbias

        tape.record((x, gain, bias), out, back)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = _out(0.5 * xd * (1.0 + t))
    tape = _recording(x)
    if tape:

        def back(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

        tape.record((x,), out, back)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``rate > 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = _out(x.data * keep)
    tape = _recording(x)
    if tape:
        tape.record((x,), out, lambda g: (g * keep,))
    return out


def _check_targets(targets, k: int, b: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise ShapeError(f"{t.shape[0]} targets for {b} rows")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise LabelError(f"target out of range [0, {k})")
    return t


def _check_weights(weights, k: int, dtype) -> np.ndarray:
    w = np.ones(k, dtype=np.float64) if weights is None else np.asarray(
        weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64
    ).reshape(-1)
    if w.shape != (k,):
        raise ShapeError(f"class weights shape {w.shape} does not match {k} classes")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    return w.astype(dtype)


def weighted_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Class-weighted cross-entropy from raw logits.

    ``loss = sum_i w[t_i] * -log softmax(logits_i)[t_i] / sum_i w[t_i]``
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    t = _check_targets(targets, k, b)
    w = _check_weights(weights, k, logits.dtype)
    _check_finite(logits.data, "weighted_cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    sw = w[t]
    total = sw.sum()
    out = _out(np.asarray(-(sw * logp[rows, t]).sum() / total, dtype=logits.dtype))
    tape = _recording(logits)
    if tape:

        def back(g):
            p = np.exp(logp)
            p[rows, t] -= 1.0
            return (p * (sw / total)[:, None] * g.reshape(()),)

        tape.record((logits,), out, back)
    return out


def weighted_nll(log_probs: Tensor, targets, weights=None) -> Tensor:
    """Weighted negative log-likelihood over precomputed log-probabilities."""
    if log_probs.ndim != 2:
        raise ShapeError(f"log_probs must be (batch, classes), got {log_probs.shape}")
    b, k = log_probs.shape
    t = _check_targets(targets, k, b)
    w = _check_weights(weights, k, log_probs.dtype)
    rows = np.arange(b)
    sw = w[t]
    total = sw.sum()
    out = _out(np.asarray(-(sw * log_probs.data[rows, t]).sum() / total, dtype=log_probs.dtype))
    tape = _recording(log_probs)
    if tape:

        def back(g):
            full = np.zeros_like(log_probs.data)
            full[rows, t] = -sw / total
            return (full * g.reshape(()),)

        tape.record((log_probs,), out, back)
    return out


# --------------------------------------------------------------------------
# Gradient oracle
# --------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-3,
) -> float:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``x`` may be one tensor or a sequence; ``f`` is called with the same
    structure. Everything is promoted to float64 first. Returns the max over
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    probes = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in xs]

    def call():
        return f(probes[0]) if single else f(*probes)

    with Tape() as tape:
        loss = call()
    backward(loss, tape)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in probes]

    worst = 0.0
    for p, a in zip(probes, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = call().item()
            flat[i] = orig - h
            down = call().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
