"""Small float64 tensor type with tape-based reverse-mode differentiation.

Only the operations needed by the profile GAN are provided. Operations are
recorded on the innermost active :class:`Tape`; outside a tape nothing is
recorded and ops act as plain numpy functions on :class:`Tensor` values.

Convolutions use the cross-correlation convention (no kernel flip), so a
kernel is applied in array order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "sum",
    "mean",
    "log",
    "clamp",
    "sigmoid",
    "leaky_relu",
    "softmax",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "pad1d",
    "conv1d_valid",
    "downsample",
    "take_last",
    "spectral_normalize",
    "adam_step",
    "clip_grad_norm",
]

SIGMA_EPS = 1e-12


class Tensor:
    """Immutable n-dimensional float64 array.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Whether :func:`backward` should produce a gradient for this tensor.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # skips the defensive copy for freshly computed arrays
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    grad_fn: Callable


class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; ops evaluated inside the ``with`` block that
    involve a ``requires_grad`` input are appended in evaluation order, which
    is a topological order of the computation.
    """

    _stack: list = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, inputs, out, grad_fn):
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    if requires_grad and Tape._stack:
        Tape._stack[-1].records.append(_Record(op, tuple(inputs), result, grad_fn))
    return result


def backward(tape, loss, wrt=None):
    """Reverse sweep over ``tape`` starting from scalar ``loss``.

    Returns a list of gradients aligned with ``wrt`` when given (zeros for
    tensors with no path to the loss), otherwise a dict mapping every
    ``requires_grad`` leaf that received a gradient to its gradient array.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                keep[key] = inp
    if wrt is not None:
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
    return {keep[k]: g for k, g in grads.items() if k not in produced and keep[k].requires_grad}


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sum(a, axis=None):
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.sum(a.data, axis=axis), grad_fn)


def mean(a):
    n = a.size
    shape = a.shape
    return _emit("mean", (a,), np.mean(a.data),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def log(a):
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def clamp(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clamp", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope):
    """Elementwise ``x if x >= 0 else slope * x``."""
    x = a.data
    scale = np.where(x >= 0, 1.0, slope)
    return _emit("leaky_relu", (a,), x * scale, lambda g: (g * scale,))


def softmax(a):
    """Softmax along the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, grad_fn)


# --- shape -----------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (a,), a.data[index], grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors),
                 np.concatenate([t.data for t in tensors], axis=axis),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad1d(a, left, right):
    """Zero-pad the last axis."""
    n = a.shape[-1]
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    return _emit("pad1d", (a,), np.pad(a.data, width),
                 lambda g: (g[..., left:left + n],))


# --- convolution and sampling ----------------------------------------------

def conv1d_valid(x, w):
    """Valid 1D cross-correlation.

    ``out[b, o, i] = sum_c sum_j x[b, c, i + j] * w[o, c, j]``

    Parameters
    ----------
    x : Tensor
        Input of shape ``[batch, channels, length]``.
    w : Tensor
        Kernel of shape ``[out_channels, channels, width]``.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d_valid expects 3D input and kernel, got {x.shape} and {w.shape}")
    n, c, length = x.shape
    o, cw, k = w.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {cw}")
    if length < k:
        raise ValueError(f"input length {length} shorter than kernel width {k}")
    xd, wd = x.data, w.data
    win = sliding_window_view(xd, k, axis=2)  # [n, c, L', k]
    out = np.tensordot(win, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2], [0, 2])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
            gwin = sliding_window_view(gpad, k, axis=2)  # [n, o, L, k]
            gx = np.tensordot(gwin, wd[:, :, ::-1], axes=([1, 3], [0, 2])).transpose(0, 2, 1)
        return gx, gw

    return _emit("conv1d_valid", (x, w), out, grad_fn)


def downsample(a, step, phase=0):
    """Keep every ``step``-th sample of the last axis starting at ``phase``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if not 0 <= phase < step:
        raise ValueError(f"phase must satisfy 0 <= phase < step, got phase={phase}, step={step}")
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[..., phase::step] = g
        return (full,)

    return _emit("downsample", (a,), a.data[..., phase::step], grad_fn)


def take_last(a, index):
    """Gather along the last axis; ``index`` broadcasts against ``a``'s leading axes."""
    index = np.asarray(index, dtype=np.intp)
    lead = a.shape[:-1]
    index = np.broadcast_to(index, lead + index.shape[-1:])
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        grid = np.indices(index.shape, sparse=True)[:-1]
        np.add.at(full, (*grid, index), g)
        return (full,)

    return _emit("take_last", (a,), np.take_along_axis(a.data, index, axis=-1), grad_fn)


# --- spectral normalization ------------------------------------------------

def _l2normalize(v):
    return v / max(np.linalg.norm(v), SIGMA_EPS)


def spectral_normalize(weight, u, power_iters=1):
    """Divide ``weight`` by its largest singular value estimated by power iteration.

    The weight is viewed as a matrix ``[out, -1]``. ``u`` and the derived
    right vector are treated as constants for differentiation.

    Returns
    -------
    normalized : Tensor
    u : ndarray
        Updated left singular vector estimate, to persist across calls.
    sigma : float
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    if not np.linalg.norm(u) > 0:
        raise ValueError("u must be nonzero")
    w2 = weight.data.reshape(weight.shape[0], -1)
    for _ in range(power_iters):
        v = _l2normalize(w2.T @ u)
        u = _l2normalize(w2 @ v)
    sigma = float(u @ w2 @ v)
    clamped = sigma < SIGMA_EPS
    s = SIGMA_EPS if clamped else sigma
    outer = np.outer(u, v).reshape(weight.shape)
    wd = weight.data

    def grad_fn(g):
        gw = g / s
        if not clamped:
            gw = gw - (np.sum(g * wd) / s**2) * outer
        return (gw,)

    return _emit("spectral_normalize", (weight,), wd / s, grad_fn), u, sigma


# --- optimization ----------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros(param.shape), np.zeros(param.shape), 0)


def adam_step(param, grad, state, lr, beta1=0.5, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with bias correction; weight decay enters as an L2 gradient term.

    Returns the new parameter tensor and the new state; inputs are not modified.
    """
    p = param.data
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if weight_decay:
        g = g + weight_decay * p
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    denom = np.sqrt(v_hat) + eps
    step = np.divide(m_hat, denom, out=np.zeros_like(m_hat), where=denom > 0)
    new = Tensor._wrap(p - lr * step, param.requires_grad)
    new.name = param.name
    return new, AdamState(m, v, t)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    total = np.sqrt(np.sum([np.sum(g * g) for g in grads]))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads]
    return grads
