"""Tape-based reverse-mode automatic differentiation on dense numpy arrays.

Every differentiable quantity in the engine (images, depth maps, poses,
light parameters, network weights) lives in a :class:`Tensor`. Operations
record their inputs and a backward closure on the output node; calling
``backward()`` on a scalar replays the tape in reverse topological order
and accumulates gradients additively into every reachable tensor that has
``requires_grad`` set.

The graph is rebuilt on every forward pass and is acyclic by construction.
Tensors are immutable after forward construction except for gradient
accumulation, so independent tapes can run concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "sigmoid", "absolute", "relu", "leaky_relu", "maximum",
    "tsum", "tmean", "matmul", "reshape", "transpose", "flip",
    "concatenate", "stack", "getitem", "scatter", "where",
    "conv2d", "conv_transpose2d",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (forward values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional array with an attached gradient slot.

    ``grad`` is lazily allocated the first time a backward pass reaches the
    tensor and always matches ``data`` in shape. Two backward passes through
    shared nodes sum their contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    # -- gradient machinery ---------------------------------------------
    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        # ``fresh`` marks a newly allocated, unaliased array that may be
        # adopted directly instead of copied into a zero buffer
        if self.grad is None:
            self.grad = g if fresh and g.dtype == self.data.dtype \
                else g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        The receiver must be a scalar (single element); the seed gradient
        is 1. Unreachable parameters are left untouched (grad stays None).
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss, got shape "
                             f"{self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[["Tensor"], Callable[[], None]] | None) -> Tensor:
    """Build an output node; record the tape entry only when needed."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req and backward is not None:
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, np.generic) and x.ndim == 0)


def add(a, b) -> Tensor:
    # python scalars stay scalars so fp32 graphs are not upcast
    if _is_scalar(b) and isinstance(a, Tensor):
        s = float(b)

        def bws(out):
            def run():
                a._accumulate(out.grad)
            return run

        return _make(a.data + s, (a,), bws)
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                g = _unbroadcast(out.grad, a.shape)
                a._accumulate(g, fresh=g is not out.grad)
            if b.requires_grad:
                g = _unbroadcast(out.grad, b.shape)
                b._accumulate(g, fresh=g is not out.grad)
        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        return add(a, -float(b))
    if _is_scalar(a) and isinstance(b, Tensor):
        s = float(a)

        def bws(out):
            def run():
                b._accumulate(-out.grad, fresh=True)
            return run

        return _make(s - b.data, (b,), bws)
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                g = _unbroadcast(out.grad, a.shape)
                a._accumulate(g, fresh=g is not out.grad)
            if b.requires_grad:
                b._accumulate(-_unbroadcast(out.grad, b.shape), fresh=True)
        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        s = float(b)

        def bws(out):
            def run():
                a._accumulate(out.grad * s, fresh=True)
            return run

        return _make(a.data * s, (a,), bws)
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape), fresh=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape), fresh=True)
        return run

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    if _is_scalar(b) and isinstance(a, Tensor):
        s = float(b)

        def bws(out):
            def run():
                a._accumulate(out.grad / s, fresh=True)
            return run

        return _make(a.data / s, (a,), bws)
    if _is_scalar(a) and isinstance(b, Tensor):
        s = float(a)

        def bws(out):
            def run():
                b._accumulate(-out.grad * s / (b.data * b.data), fresh=True)
            return run

        return _make(s / b.data, (b,), bws)
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad / b.data, a.shape), fresh=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data),
                                           b.shape), fresh=True)
        return run

    return _make(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(-out.grad, fresh=True)
        return run

    return _make(-a.data, (a,), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(out):
        def run():
            a._accumulate(out.grad * p * a.data ** (p - 1.0), fresh=True)
        return run

    return _make(a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    val = np.exp(a.data)

    def bw(out):
        def run():
            a._accumulate(out.grad * out.data, fresh=True)
        return run

    return _make(val, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(out.grad / a.data, fresh=True)
        return run

    return _make(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    val = np.sqrt(a.data)

    def bw(out):
        def run():
            a._accumulate(out.grad * 0.5 / out.data, fresh=True)
        return run

    return _make(val, (a,), bw)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(out.grad * np.cos(a.data), fresh=True)
        return run

    return _make(np.sin(a.data), (a,), bw)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(-out.grad * np.sin(a.data), fresh=True)
        return run

    return _make(np.cos(a.data), (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.data)

    def bw(out):
        def run():
            a._accumulate(out.grad * (1.0 - out.data * out.data), fresh=True)
        return run

    return _make(val, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        def run():
            a._accumulate(out.grad * out.data * (1.0 - out.data), fresh=True)
        return run

    return _make(val, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(out.grad * np.sign(a.data), fresh=True)
        return run

    return _make(np.abs(a.data), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(out.grad * (a.data > 0), fresh=True)
        return run

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(out.grad * np.where(a.data > 0, 1.0, slope), fresh=True)
        return run

    return _make(np.where(a.data > 0, a.data, slope * a.data), (a,), bw)


def maximum(a, b) -> Tensor:
    # Tie gradient goes to the first argument (deterministic subgradient).
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * take_a, a.shape), fresh=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape), fresh=True)
        return run

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def where(cond, a, b) -> Tensor:
    """Select elementwise by a constant boolean condition."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accumulate(_unbroadcast(np.where(cond, out.grad, 0.0), a.shape),
                              fresh=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.where(cond, 0.0, out.grad), b.shape),
                              fresh=True)
        return run

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy(), fresh=True)
        return run

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / n, fresh=True)
        return run

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bw(out):
        def run():
            a._accumulate(out.grad.reshape(a.shape))
        return run

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(out):
        def run():
            a._accumulate(out.grad.transpose(inv))
        return run

    return _make(a.data.transpose(axes), (a,), bw)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def run():
            a._accumulate(np.flip(out.grad, axis=axis))
        return run

    return _make(np.flip(a.data, axis=axis).copy(), (a,), bw)


def concatenate(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    p._accumulate(out.grad[tuple(sl)])
        return run

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def bw(out):
        def run():
            gs = np.moveaxis(out.grad, axis, 0)
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accumulate(gs[i])
        return run

    return _make(np.stack([p.data for p in parts], axis=axis), tuple(parts), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None
               for p in parts)


def getitem(a, idx) -> Tensor:
    """Slice or gather. Integer-array indices replay through np.add.at."""
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            if basic:
                g[idx] += out.grad
            else:
                np.add.at(g, idx, out.grad)
            a._accumulate(g, fresh=True)
        return run

    val = a.data[idx]
    if np.isscalar(val) or val.ndim == 0:
        val = np.asarray(val)
    return _make(val.copy() if isinstance(val, np.ndarray) else val, (a,), bw)


def scatter(shape: tuple[int, ...], idx, values, dtype=None) -> Tensor:
    """Place ``values`` at unique positions ``idx`` of a zero array.

    Positions must not repeat; the backward pass gathers at the same
    indices.
    """
    values = as_tensor(values)
    base = np.zeros(shape, dtype=dtype or values.data.dtype)
    base[idx] = values.data

    def bw(out):
        def run():
            values._accumulate(out.grad[idx], fresh=True)
        return run

    return _make(base, (values,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                ga = np.matmul(out.grad, _swap_last(b.data))
                a._accumulate(_unbroadcast(ga, a.shape), fresh=True)
            if b.requires_grad:
                gb = np.matmul(_swap_last(a.data), out.grad)
                b._accumulate(_unbroadcast(gb, b.shape), fresh=True)
        return run

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Fused batch normalization over (B, H, W) of a channels-last map.

    Returns (y, batch_mean, batch_var) with the standard fused backward;
    the mean and variance come back as plain arrays for running-stat
    updates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes)
    cen = x.data - mu
    var = np.mean(cen * cen, axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv_std
    y = xhat * gamma.data + beta.data

    def bw(out):
        def run():
            gy = out.grad
            if beta.requires_grad:
                beta._accumulate(gy.sum(axis=axes), fresh=True)
            if gamma.requires_grad:
                gamma._accumulate((gy * xhat).sum(axis=axes), fresh=True)
            if x.requires_grad:
                gxhat = gy * gamma.data
                s1 = gxhat.sum(axis=axes)
                s2 = (gxhat * xhat).sum(axis=axes)
                gx = (inv_std / n) * (n * gxhat - s1 - xhat * s2)
                x._accumulate(gx, fresh=True)
        return run

    return _make(y, (x, gamma, beta), bw), mu, var


# ---------------------------------------------------------------------------
# convolutions (channels-last, shift-and-GEMM over kernel offsets)
# ---------------------------------------------------------------------------

def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, channels last.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    kh, kw, cin, cout = weight.shape
    b, h, w, _ = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad_hw(x.data, pad)
    out_val = np.zeros((b, oh, ow, cout), dtype=x.dtype)
    flat = out_val.reshape(-1, cout)
    wk = weight.data
    for di in range(kh):
        for dj in range(kw):
            sl = xp[:, di:di + oh * stride:stride, dj:dj + ow * stride:stride, :]
            flat += sl.reshape(-1, cin) @ wk[di, dj]
    if bias is not None:
        out_val += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            g = out.grad.reshape(-1, cout)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=0), fresh=True)
            gxp = np.zeros_like(xp) if x.requires_grad else None
            gw = np.zeros_like(wk) if weight.requires_grad else None
            for di in range(kh):
                for dj in range(kw):
                    sl_idx = (slice(None), slice(di, di + oh * stride, stride),
                              slice(dj, dj + ow * stride, stride), slice(None))
                    if gw is not None:
                        gw[di, dj] = xp[sl_idx].reshape(-1, cin).T @ g
                    if gxp is not None:
                        gxp[sl_idx] += (g @ wk[di, dj].T).reshape(b, oh, ow, cin)
            if gw is not None:
                weight._accumulate(gw, fresh=True)
            if gxp is not None:
                x._accumulate(gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp,
                              fresh=True)
        return run

    return _make(out_val, parents, bw)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 2-D convolution, channels last.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout).
    Output spatial size: (H - 1) * stride + kh - 2 * pad.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    kh, kw, cin, cout = weight.shape
    b, h, w, _ = x.shape
    oh = (h - 1) * stride + kh - 2 * pad
    ow = (w - 1) * stride + kw - 2 * pad
    xf = x.data.reshape(-1, cin)
    wk = weight.data
    out_p = np.zeros((b, oh + 2 * pad, ow + 2 * pad, cout), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            out_p[:, di:di + h * stride:stride, dj:dj + w * stride:stride, :] += \
                (xf @ wk[di, dj]).reshape(b, h, w, cout)
    out_val = out_p[:, pad:pad + oh, pad:pad + ow, :] if pad else out_p
    if bias is not None:
        out_val = out_val + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            if bias is not None and bias.requires_grad:
                bias._accumulate(out.grad.sum(axis=(0, 1, 2)), fresh=True)
            gp = _pad_hw(out.grad, pad)
            gx = np.zeros_like(x.data) if x.requires_grad else None
            gw = np.zeros_like(wk) if weight.requires_grad else None
            for di in range(kh):
                for dj in range(kw):
                    sl = gp[:, di:di + h * stride:stride,
                            dj:dj + w * stride:stride, :].reshape(-1, cout)
                    if gx is not None:
                        gx += (sl @ wk[di, dj].T).reshape(x.shape)
                    if gw is not None:
                        gw[di, dj] = xf.T @ sl
            if gx is not None:
                x._accumulate(gx, fresh=True)
            if gw is not None:
                weight._accumulate(gw, fresh=True)
        return run

    return _make(out_val, parents, bw)
