"""Define-by-run reverse-mode autodiff over double-precision numpy arrays.

The tape is implicit: every op links its output to its parents together
with a closure that routes the upstream gradient. backward() topologically
sorts that graph and accumulates gradients into .grad.
"""

from __future__ import annotations

import numpy as np

from ..errors import NotScalar, ShapeMismatch
from .. import kernels


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng=None, scale=None) -> Tensor:
    """Trainable leaf. With rng set, data is a shape and values are drawn
    from a fan-in-scaled normal."""
    if rng is not None:
        shape = tuple(data)
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        s = scale if scale is not None else 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.standard_normal(shape) * s
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _needs_grad(*tensors) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Populate .grad on every tensor reachable from the scalar loss."""
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.data.shape}")
    topo, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---- elementwise / broadcast ops ---------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def bw(g):
        if a.requires_grad or a._parents:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, requires_grad=True, _parents=(a, b), _backward=bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def bw(g):
        if a.requires_grad or a._parents:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, requires_grad=True, _parents=(a, b), _backward=bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data**p
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g / a.data)

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * out_data)

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out_data = np.where(a.data > 0, a.data, neg)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * np.where(a.data > 0, 1.0, neg + alpha))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, lo)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * (a.data > lo))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


# ---- shape ops ----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if not _needs_grad(a):
        return Tensor(out_data)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._parents:
                _accum(t, piece)

    return Tensor(out_data, requires_grad=True, _parents=tuple(tensors), _backward=bw)


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds (mass conserved)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeMismatch("gather_rows expects a 2-D tensor")
    out_data = a.data[idx]
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


# ---- reductions ---------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def bw(g):
        if a.requires_grad or a._parents:
            _accum(a, g @ b.data.T)
        if b.requires_grad or b._parents:
            _accum(b, a.data.T @ g)

    return Tensor(out_data, requires_grad=True, _parents=(a, b), _backward=bw)


def bmm(a, b) -> Tensor:
    """Batched matmul: (B,N,K) @ (B,K,M) -> (B,N,M)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeMismatch("bmm expects 3-D tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeMismatch(f"bmm {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def bw(g):
        if a.requires_grad or a._parents:
            _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad or b._parents:
            _accum(b, a.data.transpose(0, 2, 1) @ g)

    return Tensor(out_data, requires_grad=True, _parents=(a, b), _backward=bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    if not _needs_grad(a):
        return Tensor(out_data)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return Tensor(out_data, requires_grad=True, _parents=(a,), _backward=bw)


def layernorm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale/shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    if not _needs_grad(a, gain, bias):
        return Tensor(out_data)
    n = a.data.shape[-1]

    def bw(g):
        if gain.requires_grad or gain._parents:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad or bias._parents:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if a.requires_grad or a._parents:
            gx = g * gain.data
            dx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(a, dx)

    return Tensor(out_data, requires_grad=True, _parents=(a, gain, bias), _backward=bw)


def linear(x, w, b=None) -> Tensor:
    """x (N,Cin) @ w (Cin,Cout) + b."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def cosine_similarity_matrix(a, b, eps: float = 1e-12) -> Tensor:
    """Row-normalized a (N,d) against b (M,d) -> (N,M) cosines."""
    a, b = as_tensor(a), as_tensor(b)
    an = mul(a, power(add(tsum(mul(a, a), axis=1, keepdims=True), eps), -0.5))
    bn = mul(b, power(add(tsum(mul(b, b), axis=1, keepdims=True), eps), -0.5))
    return matmul(an, transpose(bn))


# ---- convolution --------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c_in, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c_in, kh, kw, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return cols.reshape(c_in * kh * kw, h_out * w_out).copy(), h_out, w_out, xp.shape


def conv2d(x, w, b=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """x (Cin,H,W) * w (Cout,Cin,kh,kw) -> (Cout,Hout,Wout); 'same'-style pad
    defaults to kh//2."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects (Cin,H,W) and (Cout,Cin,kh,kw)")
    c_out, c_in, kh, kw = w.data.shape
    if x.data.shape[0] != c_in:
        raise ShapeMismatch(f"conv2d channels {x.data.shape[0]} vs {c_in}")
    if pad is None:
        pad = kh // 2
    cols, h_out, w_out, pad_shape = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(c_out, -1)
    out_data = (wmat @ cols).reshape(c_out, h_out, w_out)
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data.reshape(-1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    if not _needs_grad(*parents):
        return Tensor(out_data)

    def bw(g):
        gmat = g.reshape(c_out, -1)
        if w.requires_grad or w._parents:
            _accum(w, (gmat @ cols.T).reshape(w.data.shape))
        if b is not None and (b.requires_grad or b._parents):
            _accum(b, gmat.sum(axis=1).reshape(b.data.shape))
        if x.requires_grad or x._parents:
            gcols = wmat.T @ gmat
            gx_pad = kernels.col2im_add(
                gcols, c_in, kh, kw, pad_shape[1], pad_shape[2], h_out, w_out, stride
            )
            h, wdt = x.data.shape[1], x.data.shape[2]
            _accum(x, gx_pad[:, pad : pad + h, pad : pad + wdt])

    return Tensor(out_data, requires_grad=True, _parents=parents, _backward=bw)
