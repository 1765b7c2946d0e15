"""A small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the graph in
reverse topological order. Tensors keep the dtype they were created with, so
the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import UsageError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op!r})"

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

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, params=None):
        """Accumulate gradients into every reachable leaf.

        Leaves listed in ``params`` that the loss does not reach get a zero
        gradient instead of ``None``.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for p in params or ():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    # Operator sugar.
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, 1.0 / o) if np.isscalar(o) else div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise UsageError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return Tensor(a.data + b.data, _parents=(a, b), op="add",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return Tensor(a.data - b.data, _parents=(a, b), op="sub",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return Tensor(a.data * b.data, _parents=(a, b), op="mul",
                  _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return Tensor(out, _parents=(a, b), op="div",
                  _backward=lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return Tensor(x.data * x.data, _parents=(x,), op="square",
                  _backward=lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    out = np.sqrt(x.data + eps)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return Tensor(out, _parents=(x,), op="sqrt", _backward=bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, _parents=(x,), op="exp", _backward=lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), _parents=(x,), op="log", _backward=lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0).astype(x.data.dtype), _parents=(x,), op="relu",
                  _backward=lambda g: (g * mask,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); zero gradient where the floor is active."""
    mask = x.data >= lo
    out = np.where(mask, x.data, lo).astype(x.data.dtype)
    return Tensor(out, _parents=(x,), op="clamp_min", _backward=lambda g: (g * mask,))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, _parents=(x,), op="sum", _backward=bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise UsageError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return Tensor(out, _parents=(x,), op="reshape", _backward=lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(np.array(out), _parents=(x,), op="getitem", _backward=bw)


def concat(xs, axis=0) -> Tensor:
    xs = list(xs)
    ref = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise UsageError(f"concat: incompatible shapes {tuple(ref)} and {tuple(s)}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return Tensor(np.concatenate([t.data for t in xs], axis=axis), _parents=tuple(xs), op="concat",
                  _backward=lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs, axis=0) -> Tensor:
    xs = list(xs)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise UsageError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError("matmul supports 2-D operands only")
    return Tensor(a.data @ b.data, _parents=(a, b), op="matmul",
                  _backward=lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise UsageError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = matmul(x, Tensor(w.data.T, _parents=(w,), op="T", _backward=lambda g: (g.T,)))
    return out if b is None else add(out, b)


def amax(x: Tensor, axis) -> Tensor:
    """Max over ``axis`` (int or tuple); gradient goes to the first maximiser."""
    axes = tuple(np.atleast_1d(axis) % x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    xt = np.transpose(x.data, perm)
    flat = xt.reshape(xt.shape[: len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], -1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], -1)
        gt = gf.reshape(xt.shape)
        return (np.transpose(gt, np.argsort(perm)),)

    return Tensor(out, _parents=(x,), op="amax", _backward=bw)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(x,), op="softmax", _backward=bw)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, _parents=(x,), op="log_softmax", _backward=bw)


def l2_normalize(x: Tensor, axis=-1, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return Tensor(y, _parents=(x,), op="l2_normalize", _backward=bw)


def dft2_magnitude(x: Tensor) -> Tensor:
    """|2-D DFT| over the last two axes.

    The gradient at a zero-magnitude coefficient is defined as 0.
    """
    h, w = x.shape[-2:]
    y = np.fft.fft2(x.data.astype(np.float64))
    mag = np.abs(y)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(mag > 0, y / np.where(mag > 0, mag, 1.0), 0.0)
        # For real input, dL/dx = H*W * Re(ifft2(dL/dRe + i dL/dIm)).
        return (h * w * np.real(np.fft.ifft2(g * unit)),)

    return Tensor(mag.astype(x.data.dtype), _parents=(x,), op="dft2_magnitude", _backward=bw)


# ---------------------------------------------------------------------------
# Convolution family. Layout is (N, C, H, W).


def pad2d(x: Tensor, ph: int, pw: int, circular_w: bool = False) -> Tensor:
    """Zero-pad rows by ``ph``; pad columns by ``pw`` with zeros or wrap-around."""
    d = x.data
    if circular_w and pw:
        d = np.concatenate([d[..., -pw:], d, d[..., :pw]], axis=-1)
        d = np.pad(d, [(0, 0)] * (d.ndim - 2) + [(ph, ph), (0, 0)])
    else:
        d = np.pad(d, [(0, 0)] * (d.ndim - 2) + [(ph, ph), (pw, pw)])
    w = x.shape[-1]

    def bw(g):
        g = g[..., ph: g.shape[-2] - ph, :]
        if circular_w and pw:
            core = g[..., pw: pw + w].copy()
            core[..., -pw:] += g[..., :pw]
            core[..., :pw] += g[..., pw + w:]
            return (core,)
        return (g[..., pw: pw + w],)

    return Tensor(d, _parents=(x,), op="pad2d", _backward=bw)


def _im2col(d: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, OH*OW), channel-major."""
    n, c, h, w = d.shape
    win = np.lib.stride_tricks.sliding_window_view(d, (kh, kw), axis=(2, 3))
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, (h - kh + 1) * (w - kw + 1))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0,
           circular_w: bool = False) -> Tensor:
    """Cross-correlation with stride 1. ``w`` is (O, C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise UsageError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if padding:
        x = pad2d(x, padding, padding, circular_w)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    if oh <= 0 or ow <= 0:
        raise UsageError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    cols = _im2col(x.data, kh, kw)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(n, o, oh, ow)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(n, o, oh * ow)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        # Input gradient is a full correlation with the flipped, transposed kernel.
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = np.matmul(wt, _im2col(gp, kh, kw)).reshape(n, c, h, wd)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return Tensor(out, _parents=parents, op="conv2d", _backward=bw)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise UsageError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(-1)
    out = np.take_along_axis(blocks, arg[..., None], -1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], -1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return Tensor(out, _parents=(x,), op="maxpool2x2", _backward=bw)


def upsample2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor(out, _parents=(x,), op="upsample2x", _backward=bw)
