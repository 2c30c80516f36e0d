"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray plus the closure that pushes its gradient
to its parents. Only the op set needed by the backbones, attention modules and
heads is provided. Images and feature maps are NHWC.
"""
import contextlib
import threading

import numpy as np

from . import backend


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, params=None):
        backward(self, params)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op, arr):
    # a reduction is cheaper than an elementwise mask; confirm before raising
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {arr.shape}")


def _make(op, data, parents, backward_fn):
    """Build an op output, recording the trace when any parent needs gradients."""
    _check_finite(op, data)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _colsum(a):
    """Column sums of a 2-D array; a BLAS vector product is much faster than ``sum(axis=0)`` on tall arrays."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _rowsum(a):
    """Sums over the last axis, keeping it."""
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss, params=None):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = None
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", data, (a, b), bw)


def relu(x):
    data = np.maximum(x.data, 0)
    return _make("relu", data, (x,), lambda g: (g * (data > 0),))


def sigmoid(x):
    data = _sigmoid(x.data)
    return _make("sigmoid", data, (x,), lambda g: (g * data * (1 - data),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (data * (g - (g * data).sum(axis=axis, keepdims=True)),)

    return _make("softmax", data, (x,), bw)


# ---------------------------------------------------------------- shapes


def reshape(x, shape):
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def pad_spatial(w, before, after=None):
    """Zero-pad axes 0 and 1 (e.g. to embed a small kernel in a larger one)."""
    after = before if after is None else after
    widths = [(before, after), (before, after)] + [(0, 0)] * (w.ndim - 2)
    data = np.pad(w.data, widths)
    h, wd = w.shape[0], w.shape[1]
    return _make("pad_spatial", data, (w,), lambda g: (g[before : before + h, before : before + wd],))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    data = x.data.transpose(axes)
    return _make("transpose", data, (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis=-1):
    xs = list(xs)
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", data, tuple(xs), bw)


def mean(x, axis=None, keepdims=False):
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make("mean", np.asarray(data, dtype=x.dtype), (x,), bw)


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make("sum", np.asarray(data, dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), bw)


def dense(x, w, b=None):
    """Affine map over the last axis: ``x @ w + b``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[-1]} != weight rows {w.shape[0]} (x {x.shape}, w {w.shape})")
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- conv / pool


# Column matrices above this size are built one slice of the batch at a time
# so they stay in cache. The slices are kept for the backward pass unless the
# whole matrix exceeds CONV_KEEP_BYTES, in which case they are rebuilt there.
CONV_CHUNK_BYTES = 1 << 18
CONV_KEEP_BYTES = 1 << 26


def conv2d(x, w, b=None, stride=1, padding=0):
    """NHWC convolution with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {padding}")
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    wmat = w.data.reshape(kh * kw * cin, cout)
    per_image = ho * wo * kh * kw * cin * x.data.itemsize
    step = n if pointwise else max(1, min(n, CONV_CHUNK_BYTES // max(per_image, 1)))
    m = ho * wo

    def columns(i):
        xs = x.data[i : i + step]
        return xs.reshape(-1, cin) if pointwise else backend.im2col(xs, kh, kw, stride, padding)

    keep = w.requires_grad and n * per_image <= CONV_KEEP_BYTES
    cached = {}
    if step == n:
        cols = cached[0] = columns(0)
        out = cols @ wmat
    else:
        out = np.empty((n * m, cout), dtype=np.result_type(x.data, wmat))
        for i in range(0, n, step):
            c = columns(i)
            if keep:
                cached[i] = c
            out[i * m : (i + step) * m] = c @ wmat
    if b is not None:
        out += b.data
    data = out.reshape(n, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros_like(wmat) if w.requires_grad else None
        for i in range(0, n, step):
            gi = g2[i * m : (i + step) * m]
            if gw is not None:
                c = cached[i] if i in cached else columns(i)
                gw += c.T @ gi
            if gx is not None:
                gcols = gi @ wmat.T
                xs_shape = (min(step, n - i),) + x.shape[1:]
                gx[i : i + step] = gcols.reshape(xs_shape) if pointwise else backend.col2im(gcols, xs_shape, kh, kw, stride, padding)
        gw = gw.reshape(w.shape) if gw is not None else None
        if b is None:
            return gx, gw
        return gx, gw, _colsum(g2)

    return _make("conv2d", data, parents, bw)


def max_pool2d(x):
    """2x2 max pool, stride 2."""
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"max_pool2d: need NHWC input with H, W >= 2, got {x.shape}")
    data, arg = backend.maxpool2_forward(x.data)
    return _make("max_pool2d", data, (x,), lambda g: (backend.maxpool2_backward(g, arg, x.shape),))


def avg_pool2d(x):
    """2x2 average pool, stride 2."""
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"avg_pool2d: need NHWC input with H, W >= 2, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    data = x.data[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx,)

    return _make("avg_pool2d", data, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each position over its channel (last) axis, then scale/shift per channel."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs channels {x.shape[-1]}")
    c = x.shape[-1]
    xc = x.data - _rowsum(x.data) / c
    inv = 1.0 / np.sqrt(_rowsum(xc * xc) / c + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / c * (c * gh - _rowsum(gh) - xhat * _rowsum(gh * xhat))
        if gain.requires_grad:
            gg = _colsum((g * xhat).reshape(-1, c))
        if bias.requires_grad:
            gb = _colsum(g.reshape(-1, c))
        return gx, gg, gb

    return _make("layer_norm", data.astype(x.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------- loss


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy on raw logits; ``labels`` is a plain array."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(per.mean(), dtype=z.dtype)
    n = z.size

    def bw(g):
        return (g * (_sigmoid(z) - y) / n,)

    return _make("bce_with_logits", data, (logits,), bw)
