"""Dense float64 tensors with a single-use reverse-mode tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        x = Tensor(data, requires_grad=True)
        loss = sum_(mul(x, x))
    tape.backward(loss)
    x.grad

Outside a tape every op is a plain numpy computation, which is what the
inference paths (evaluation, reference attention) use.
"""
from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "backward", "grad_check", "as_tensor",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "softmax",
    "log_softmax", "tanh", "exp", "log", "sqrt", "clamp", "sign", "abs_",
    "sum_", "mean", "l2_norm", "kl_terms", "reshape", "transpose",
    "getitem", "concat", "stack", "embed", "stop_gradient",
]

_state = threading.local()


class TapeError(RuntimeError):
    pass


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite value in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        if self.requires_grad:
            tape = _active_tape()
            if tape is not None:
                tape._register_leaf(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    A tape may be backpropagated exactly once. Re-entering a used tape or
    calling backward a second time raises ``TapeError``.
    """

    def __init__(self):
        self._records = []
        self._leaves = {}
        self._used = False
        self._prev = None

    def __enter__(self):
        if self._used:
            raise TapeError("tape already consumed")
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self._records)

    def _register_leaf(self, t):
        self._leaves[id(t)] = t
        t._tape = self

    def _record(self, out, inputs, vjp):
        out._tape = self
        self._records.append((out, inputs, vjp))

    def backward(self, loss):
        if self._used:
            raise TapeError("backward already called on this tape; build a new one")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise TapeError("loss must be a scalar tensor")
        if loss._tape is not self:
            raise TapeError("loss is not recorded on this tape (detached)")
        self._used = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.data.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g
        self._records.clear()


def backward(loss):
    """Backpropagate ``loss`` through the tape it was recorded on."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("loss is not recorded on any tape (detached)")
    loss._tape.backward(loss)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced a non-finite value")
    return arr


def _make(data, name, inputs, vjp):
    data = _finite(np.asarray(data, dtype=np.float64), name)
    tape = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    if tape is not None and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t.requires_grad and t._tape is not tape:
                tape._register_leaf(t)
        out.requires_grad = True
        tape._record(out, inputs, vjp)
    return out


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div by zero")
    q = a.data / b.data
    return _make(q, "div", (a, b), lambda g: (g / b.data, -g * q / b.data))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, "sqrt", (a,),
                 lambda g: (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient 1 strictly inside, 0 at or beyond a bound."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def sign(a):
    a = as_tensor(a)
    return _make(np.sign(a.data), "sign", (a,), lambda g: (np.zeros_like(g),))


def abs_(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


# -- reductions ------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,),
                 lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[ax] for ax in axes]))
    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / n,))


def l2_norm(a, axis=None, keepdims=False):
    """Euclidean norm. The subgradient at the origin is taken as zero."""
    a = as_tensor(a)
    shape = a.data.shape
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        nb = _expand(n, shape, axis, keepdims)
        gb = _expand(g, shape, axis, keepdims)
        safe = np.where(nb > 0, nb, 1.0)
        return (np.where(nb > 0, gb * a.data / safe, 0.0),)

    return _make(n, "l2_norm", (a,), vjp)


def kl_terms(p, q):
    """Elementwise p * ln(p / q) with 0 * ln(0 / q) = 0."""
    p, q = as_tensor(p), as_tensor(q)
    pd, qd = np.broadcast_arrays(p.data, q.data)
    if np.any((qd <= 0) & (pd > 0)):
        raise ValueError("kl_terms: q must be positive wherever p > 0")
    if np.any(pd < 0):
        raise ValueError("kl_terms: p must be nonnegative")
    pos = pd > 0
    safe_p = np.where(pos, pd, 1.0)
    safe_q = np.where(pos, qd, 1.0)
    logr = np.log(safe_p / safe_q)
    out = np.where(pos, pd * logr, 0.0)

    def vjp(g):
        return (np.where(pos, g * (logr + 1.0), 0.0),
                np.where(pos, -g * safe_p / safe_q, 0.0))

    return _make(out, "kl_terms", (p, q), vjp)


# -- softmax family --------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (a,), vjp)


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if b.ndim == 2 and g.ndim > 2:
            # fold leading axes into one product instead of a stack of them
            a2 = a.data.reshape(-1, a.shape[-1])
            return ga, a2.T @ g.reshape(-1, g.shape[-1])
        return ga, np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.data.shape

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], "getitem", (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                 tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack",
                 tuple(tensors), vjp)


def embed(table, ids):
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range")
    shape = table.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], "embed", (table,), vjp)


# -- gradient checking -----------------------------------------------------

def grad_check(fn, x, h=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|ad - fd| / max(1e-8, |fd|)``. Inputs at nondifferentiable points (for
    example ``l2_norm`` at the origin) are outside the contract.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        y = fn(xt)
    if y.requires_grad:
        tape.backward(y)
        ad = xt.grad
    else:
        ad = np.zeros_like(x0)
    fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(Tensor(x0)).item()
        flat[i] = orig - h
        fm = fn(Tensor(x0)).item()
        flat[i] = orig
        fd_flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(ad - fd) / np.maximum(1e-8, np.abs(fd))
    return float(err.max()) if err.size else 0.0
