"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every operation stores a closure that routes
gradients back to its parents, and a fresh tape is built on every forward
pass.  backward() runs once per recorded loss; running it twice on the
same tape is an error.  Only the operations the dialogue stacks need are
provided, all in 64-bit floats so finite-difference checks stay clean.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# Finite stand-in for -inf: large enough that softmax assigns exactly zero
# weight, small enough that gradients stay NaN-free.
MASK_VALUE = -1e9

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-dimensional float64 value, optionally tracking gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backprop = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A gradient-free view sharing this tensor's storage."""
        return Tensor(self.data)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # Copy: g may alias another node's gradient buffer.
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _parents=(a, b))
    if out.requires_grad:
        def backprop():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.data.shape))
        out._backprop = backprop
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data, _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, -out.grad)
        out._backprop = backprop
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _parents=(a, b))
    if out.requires_grad:
        def backprop():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))
        out._backprop = backprop
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, out.grad * c)
        out._backprop = backprop
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs matrices, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))
    if out.requires_grad:
        def backprop():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        out._backprop = backprop
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,))
    if out.requires_grad:
        def backprop():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        out._backprop = backprop
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, out.grad.reshape(x.data.shape))
        out._backprop = backprop
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    out = Tensor(x.data.transpose(axes), _parents=(x,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def backprop():
            _accum(x, out.grad.transpose(inverse))
        out._backprop = backprop
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries along `axis` starting at `start`."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index], _parents=(x,))
    if out.requires_grad:
        def backprop():
            g = np.zeros_like(x.data)
            g[index] = out.grad
            _accum(x, g)
        out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, out.grad * (x.data > 0.0))
        out._backprop = backprop
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU (optional FFN activation)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf, _parents=(x,))
    if out.requires_grad:
        def backprop():
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            _accum(x, out.grad * (cdf + x.data * pdf))
        out._backprop = backprop
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,))
    if out.requires_grad:
        def backprop():
            g = out.grad
            _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
        out._backprop = backprop
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(y, _parents=(x,))
    if out.requires_grad:
        def backprop():
            g = out.grad
            _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        out._backprop = backprop
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ValueError(
            f"layer_norm gain/bias {gain.data.shape}/{bias.data.shape} "
            f"do not match normalized dimension of {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias))
    if out.requires_grad:
        def backprop():
            g = out.grad
            d = x.data.shape[-1]
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gh = g * gain.data
                gx = inv * (gh
                            - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
                _accum(x, gx)
        out._backprop = backprop
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Overwrite positions where `mask` is True; gradient is zero there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        m = np.broadcast_to(mask, x.data.shape)
    except ValueError:
        raise ValueError(
            f"mask shape {mask.shape} does not broadcast to scores shape {x.data.shape}")
    out = Tensor(np.where(m, value, x.data), _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, out.grad * ~m)
        out._backprop = backprop
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip the call entirely outside training."""
    if rate <= 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    k = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * k, _parents=(x,))
    if out.requires_grad:
        def backprop():
            _accum(x, out.grad * keep * k)
        out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# lookups and token-level losses


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table`; the gradient scatter-adds back into it."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], _parents=(table,))
    if out.requires_grad:
        def backprop():
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[-1]))
            _accum(table, g)
        out._backprop = backprop
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Fused per-token -log softmax(logits)[target]; logits [n, vocab]."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, vocab] logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    out = Tensor(-ls[rows, targets], _parents=(logits,))
    if out.requires_grad:
        def backprop():
            g = out.grad[:, None]
            gz = np.exp(ls) * g
            gz[rows, targets] -= out.grad
            _accum(logits, gz)
        out._backprop = backprop
    return out


def unlikelihood(logits: Tensor, targets, p_max: float = 1.0 - 1e-7) -> Tensor:
    """Per-token -log(1 - p[target]), with p clamped to p_max before the log.

    The clamp caps the loss at -log(1 - p_max) and zeroes the gradient in the
    clamped region, so a target probability driven to 1 cannot produce inf.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"unlikelihood expects [n, vocab] logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    rows = np.arange(n)
    pt = p[rows, targets]
    clamped = pt > p_max
    out = Tensor(-np.log1p(-np.minimum(pt, p_max)), _parents=(logits,))
    if out.requires_grad:
        def backprop():
            w = np.where(clamped, 0.0, pt / (1.0 - pt)) * out.grad
            gz = -w[:, None] * p
            gz[rows, targets] += w
            _accum(logits, gz)
        out._backprop = backprop
    return out


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every trainable ancestor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise RuntimeError("loss was not produced by a recorded forward pass")
    if loss._consumed:
        raise RuntimeError("backward already ran on this tape; rerun the forward pass")
    loss._consumed = True

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None:
            node._backprop()
