"""Dense-tensor reverse-mode autodiff over a fixed op set.

Tensors wrap row-major numpy arrays (float32 by default; float64 is
preserved when supplied, which the finite-difference checker relies on).
Ops run eagerly; while a Tape is active (``with Tape() as t:``) every op
records a backward rule, and ``t.backward(loss)`` walks the records in
reverse construction order, summing gradients for shared subexpressions
into the leaves' ``.grad`` buffers. Without an active tape the same ops
are plain numpy evaluation. There is no implicit broadcasting beyond the
bias pattern in ``add``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from . import kernels

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: object  # callable: out_grad -> per-input grads


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records ops while active; replays them backwards for gradients."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")
        return False

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> None:
        """Public so model code can register custom differentiable ops."""
        self.nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(t, Tensor):
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + ig
                else:
                    grads[tid] = ig
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad:
                    leaves[id(t)] = t
        for tid, t in leaves.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = current_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _shape_error(op: str, *tensors: Tensor):
    shapes = " and ".join(str(tuple(t.shape)) for t in tensors)
    return ContractError(f"{op}: incompatible shapes {shapes}")


# ---------------------------------------------------------------------------
# Linear algebra and structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also the bias pattern [.., n] + [n]."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def backward(g):
            return g, g

    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        lead = tuple(range(a.data.ndim - 1))

        def backward(g):
            return g, g.sum(axis=lead) if lead else g

    else:
        raise _shape_error("add", a, b)
    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        return (g * c,)

    return _record(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: no inputs")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.data.ndim
    index = tuple(
        slice(start, stop) if d == axis else slice(None) for d in range(a.data.ndim)
    )
    out = Tensor(a.data[index].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes).copy())

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise _shape_error("embedding_lookup", table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def backward(g):
        full = np.zeros_like(table.data, dtype=g.dtype)
        rows = g.reshape(-1, table.shape[1])
        kernels.scatter_add_rows(full, ids.reshape(-1), rows)
        return (full, None)

    return _record(out, (table, ids), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along one axis; positions where mask is False come out
    exactly 0 and the rest renormalize over the valid set."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax: some row is masked everywhere")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        e = np.exp(np.where(mask, x - m, -np.inf))
        e = np.where(mask, e, 0.0).astype(x.dtype)
    else:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        gxhat = g * gain.data
        mean1 = gxhat.mean(axis=-1, keepdims=True)
        mean2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - mean1 - xhat * mean2)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dy,)

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when no rng is supplied (eval mode)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must lie in [0, 1), got {rate}")
    if rng is None or rate == 0.0:
        out = Tensor(a.data.copy())

        def backward(g):
            return (g,)

    else:
        keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
        factor = 1.0 / (1.0 - rate)
        out = Tensor(a.data * keep * factor)

        def backward(g):
            return (g * keep * factor,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and losses


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), backward)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def backward(g):
        if axis is None:
            return ((np.broadcast_to(g, a.shape) / count).astype(g.dtype),)
        return ((np.broadcast_to(np.expand_dims(g, axis), a.shape) / count).astype(g.dtype),)

    return _record(out, (a,), backward)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first maximizer."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    picked = np.take_along_axis(a.data, idx, axis=axis)
    out = Tensor(picked if keepdims else picked.squeeze(axis))

    def backward(g):
        full = np.zeros_like(a.data)
        g_keep = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, g_keep, axis=axis)
        return (full,)

    return _record(out, (a,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not the
    ignore marker. Log-softmax is computed stably inside."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractError(
            f"cross_entropy: logits {tuple(logits.shape)} need targets "
            f"of shape ({logits.shape[0]},), got {tuple(targets.shape)}"
        )
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy: every target is the ignore marker")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(valid)[0]
    picked = logp[rows, targets[rows]]
    out = Tensor(np.asarray(-picked.sum() / n_valid, dtype=x.dtype))

    def backward(g):
        p = np.exp(logp)
        grad = p.copy()
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / n_valid), None)

    return _record(out, (logits, targets), backward)


# ---------------------------------------------------------------------------
# Finite-difference checking


@dataclass
class FDReport:
    """Result of comparing analytic gradients to central differences."""

    max_rel_error: float
    n_checked: int
    passed: bool
    worst_index: tuple

    def __str__(self):
        word = "pass" if self.passed else "FAIL"
        return (
            f"{word}: max relative error {self.max_rel_error:.3e} "
            f"over {self.n_checked} coordinates (worst at {self.worst_index})"
        )


def _relative_error(a: float, n: float) -> float:
    diff = abs(a - n)
    if diff <= 1e-8:
        return 0.0
    return diff / max(abs(a), abs(n))


def finite_difference_check(
    f,
    x: Tensor,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords: int = 256,
    rng: np.random.Generator | None = None,
) -> FDReport:
    """Check d f(x) / dx against central differences in float64.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    All coordinates are checked when x is small; otherwise at least 32
    are sampled without replacement.
    """
    base = x.data.astype(np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        tape.backward(loss)
    analytic = probe.grad.reshape(-1)

    size = base.size
    n_take = size if size <= max_coords else max(32, max_coords)
    if size <= n_take:
        coords = np.arange(size)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(size, size=n_take, replace=False)

    def value(arr):
        return float(f(Tensor(arr)).data)

    worst = 0.0
    worst_index = ()
    flat = base.reshape(-1)
    for c in coords:
        keep = flat[c]
        flat[c] = keep + step
        up = value(base)
        flat[c] = keep - step
        down = value(base)
        flat[c] = keep
        numeric = (up - down) / (2.0 * step)
        rel = _relative_error(float(analytic[c]), numeric)
        if rel > worst:
            worst = rel
            worst_index = np.unravel_index(int(c), x.shape)
    return FDReport(
        max_rel_error=worst,
        n_checked=len(coords),
        passed=worst < tolerance,
        worst_index=tuple(int(i) for i in worst_index),
    )
