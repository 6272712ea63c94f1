"""Dense-array reverse-mode differentiation on a recording tape.

Values are numpy arrays wrapped in :class:`Tensor`. While a :class:`Tape`
is active, every op appends its output node with a backward rule; the tape
is therefore topologically ordered by construction. ``backward`` walks it
in reverse from a scalar loss and accumulates gradients into leaves.
``detach`` copies values onto a fresh leaf, cutting the backward path.
"""

from __future__ import annotations

import threading
from scipy.special import erf

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParameterSet", "ShapeError", "NumericError",
    "add", "sub", "mul", "div", "scale", "matmul", "conv1d", "relu", "gelu",
    "tanh", "sigmoid", "softmax", "log_softmax", "log", "exp", "sqrt",
    "mean", "variance", "sum_", "max_", "concat", "narrow", "transpose",
    "reshape", "layernorm", "batchnorm", "broadcast_add", "clip", "arccos",
    "cos", "detach", "backward", "grad", "gradcheck",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of op outputs for one forward computation."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Dense array, optionally recorded on the active tape."""

    __slots__ = ("data", "_tape", "_index", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self._tape = None
        self._index = -1
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out: Tensor, parents: tuple, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        out._tape = tape
        out._index = len(tape.nodes)
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


def detach(t: Tensor) -> Tensor:
    """Same values on a fresh leaf; gradients do not flow past it."""
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# backward pass

def grad(loss: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. the given tensors (zeros if unused)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    wrt_ids = {id(w) for w in wrt}
    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tape = loss._tape
    if tape is not None:
        for node in reversed(tape.nodes[: loss._index + 1]):
            nid = id(node)
            if nid not in table or node._backward is None:
                continue
            g = table[nid] if nid in wrt_ids else table.pop(nid)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in table:
                    table[pid] = table[pid] + pg
                else:
                    table[pid] = pg
    return [table.get(id(w), np.zeros_like(w.data)) for w in wrt]


class ParameterSet:
    """Named parameters with a per-parameter trainable flag."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True, dtype=None) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = as_tensor(value, dtype=dtype)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}


Gradients = dict  # name -> np.ndarray, same shapes as the parameters


def backward(loss: Tensor, params: ParameterSet) -> Gradients:
    names = params.names()
    gs = grad(loss, [params[n] for n in names])
    return dict(zip(names, gs))


def gradcheck(fn, params: ParameterSet, epsilon: float = 1e-5,
              max_entries: int = 10000, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``fn()`` must rebuild the computation from the current parameter values
    and return a scalar Tensor. 64-bit parameters expected.
    """
    with Tape():
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradcheck: non-finite loss")
    analytic = backward(loss, params)

    entries = []
    for name in params.names():
        if not params.trainable(name):
            continue
        arr = params[name].data
        for flat in range(arr.size):
            entries.append((name, flat))
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(idx)]

    worst = 0.0
    for name, flat in entries:
        arr = params[name].data
        orig = arr.flat[flat]
        arr.flat[flat] = orig + epsilon
        fp = float(fn().data)
        arr.flat[flat] = orig - epsilon
        fm = float(fn().data)
        arr.flat[flat] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"gradcheck: non-finite loss while perturbing {name}")
        numeric = (fp - fm) / (2.0 * epsilon)
        a = float(analytic[name].flat[flat])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# op helpers

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # keep python-number operands from upcasting float32 graphs
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise / binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def broadcast_add(x, v) -> Tensor:
    """Add a per-utterance vector to every time frame: (B,T,D) + (B,D) or (D,)."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim != 3 or v.shape[-1] != x.shape[-1] or v.ndim not in (1, 2):
        raise ShapeError(f"broadcast_add: expected (B,T,D) and (D,) or (B,D), "
                         f"got {x.shape} and {v.shape}")
    if v.ndim == 2 and v.shape[0] != x.shape[0]:
        raise ShapeError(f"broadcast_add: batch mismatch {x.shape} vs {v.shape}")
    vexp = v.data[None, None, :] if v.ndim == 1 else v.data[:, None, :]
    out = Tensor(x.data + vexp)

    def back(g):
        gv = g.sum(axis=(0, 1)) if v.ndim == 1 else g.sum(axis=1)
        return g, gv

    return _record(out, (x, v), back)


# ---------------------------------------------------------------------------
# unary nonlinearities

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _record(out, (x,), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y * (1.0 - y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g / (2.0 * y),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.cos(x.data))
    return _record(out, (x,), lambda g: (-g * np.sin(x.data),))


def arccos(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.arccos(x.data))
    return _record(out, (x,), lambda g: (-g / np.sqrt(1.0 - x.data * x.data),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# softmax family

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# reductions

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def variance(x, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (population) variance along the given axis."""
    mu = mean(x, axis=axis, keepdims=True)
    d = sub(x, mu)
    v = mean(mul(d, d), axis=axis, keepdims=keepdims)
    return v


def max_(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.max(axis=axis, keepdims=keepdims))
    am = np.argmax(x.data, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(am, axis), gk, axis)
        return (gx,)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# shape ops

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: incompatible shapes "
                             f"{[t.shape for t in tensors]} along axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), back)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis "
                         f"{axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record(out, (x,), back)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.reshape(x.data, shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# linear algebra / convolution

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), back)


def conv1d(x, w, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution: x (B, C_in, T), w (C_out, C_in, K) -> (B, C_out, T_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: expected x (B,C,T) and w (O,C,K), "
                         f"got {x.shape} and {w.shape}")
    b, cin, t = x.shape
    cout, _, k = w.shape
    keff = (k - 1) * dilation + 1
    tp = t + 2 * padding
    if tp < keff:
        raise ShapeError(f"conv1d: input length {t} (padded {tp}) shorter than "
                         f"effective kernel {keff}")
    tout = (tp - keff) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data

    cols = np.empty((b, cin, tout, k), dtype=x.dtype)
    span = (tout - 1) * stride + 1
    for j in range(k):
        s = j * dilation
        cols[..., j] = xp[:, :, s:s + span:stride]
    out_data = np.einsum("bctk,ock->bot", cols, w.data, optimize=True)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} != ({cout},)")
        out_data = out_data + bias.data[None, :, None]
        parents.append(bias)
    out = Tensor(out_data)

    def back(g):
        gw = np.einsum("bot,bctk->ock", g, cols, optimize=True)
        gcols = np.einsum("bot,ock->bctk", g, w.data, optimize=True)
        gxp = np.zeros((b, cin, tp), dtype=x.dtype)
        for j in range(k):
            s = j * dilation
            gxp[:, :, s:s + span:stride] += gcols[..., j]
        gx = gxp[:, :, padding:padding + t] if padding else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2))
        return gx, gw

    return _record(out, tuple(parents), back)


# ---------------------------------------------------------------------------
# normalization

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must be ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), back)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batchnorm over axis 0 of a (B, F) input; running stats updated in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm: expected (B, F), got {x.shape}")
    f = x.shape[1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({f},), "
                         f"got {gamma.shape} and {beta.shape}")
    if training:
        nb = x.shape[0]
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        unbiased = var * (nb / (nb - 1)) if nb > 1 else var
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def back(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gh = g * gamma.data
        if training:
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        else:
            gx = gh * inv
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# op registry (drives the blanket gradcheck test)

OP_NAMES = (
    "add", "sub", "mul", "div", "scale", "matmul", "conv1d", "relu", "gelu",
    "tanh", "sigmoid", "softmax", "log_softmax", "log", "exp", "sqrt", "cos",
    "arccos", "clip", "mean", "variance", "sum", "max", "concat", "narrow",
    "transpose", "reshape", "layernorm", "batchnorm", "broadcast-add",
)
