"""A small dense-tensor reverse-mode differentiation core on top of numpy.

Only the operators the pyramid heads need are provided.  Spatial operators
work on the last three axes ``(C, H, W)`` and accept any leading batch
axes.  Apart from the bias / per-channel affine terms, operands must agree
in shape exactly; there is no implicit broadcasting.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gt import MIX, UNITY
from .pyramid import DONT_CARE

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Param(Tensor):
    """A trainable leaf tensor with a name and a record of how it was initialised."""

    __slots__ = ("init",)

    def __init__(self, data, name: str, init: str = "given"):
        super().__init__(data, requires_grad=True, name=name)
        self.init = init

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int = -3) -> Tensor:
    xs = list(xs)
    ref = xs[0].ndim
    ax = axis % ref
    for x in xs:
        if x.ndim != ref or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with identical leading axes."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- convolution

def _channel_apply(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply ``w`` (out, in) to the channel axis -3 of ``x``."""
    return np.moveaxis(np.tensordot(w, x, axes=([1], [x.ndim - 3])), 0, -3)


def _channel_outer(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sum over all non-channel axes of ``g[..., o, h, w] * x[..., c, h, w]``."""
    g2 = np.moveaxis(g, -3, 0).reshape(g.shape[-3], -1)
    x2 = np.moveaxis(x, -3, 0).reshape(x.shape[-3], -1)
    return g2 @ x2.T


def _check_bias(b: Tensor | None, n: int, op: str):
    if b is not None and b.shape != (n,):
        raise ShapeError(f"{op}: bias shape {b.shape} does not match {n} output channels")


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position affine map over the channel axis: ``w`` is (C_out, C_in)."""
    if x.ndim < 3 or w.ndim != 2 or w.shape[1] != x.shape[-3]:
        raise ShapeError(f"conv1x1: weight {w.shape} does not fit input {x.shape}")
    _check_bias(b, w.shape[0], "conv1x1")
    out = _channel_apply(w.data, x.data)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gx = _channel_apply(w.data.T, g)
        gw = _channel_outer(g, x.data)
        gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding; ``w`` is (C_out, C_in, 3, 3)."""
    if x.ndim < 3 or w.ndim != 4 or w.shape[1:] != (x.shape[-3], 3, 3):
        raise ShapeError(f"conv3x3: weight {w.shape} does not fit input {x.shape}")
    _check_bias(b, w.shape[0], "conv3x3")
    lead = x.shape[:-3]
    cin, h, wd = x.shape[-3:]
    cout = w.shape[0]
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding)] * 2
    xp = np.pad(x.data, pad)
    ho, wo = xp.shape[-2] - 2, xp.shape[-1] - 2
    win = sliding_window_view(xp, (3, 3), axis=(-2, -1))  # (..., cin, ho, wo, 3, 3)
    cols = np.moveaxis(win, -5, -3).reshape(-1, cin * 9)  # rows: (..., ho, wo)
    wmat = w.data.reshape(cout, cin * 9)
    out = (cols @ wmat.T).reshape(*lead, ho, wo, cout)
    out = np.moveaxis(out, -1, -3)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gmat = np.moveaxis(g, -3, -1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(*lead, ho, wo, cin, 3, 3)
        gcols = np.ascontiguousarray(np.moveaxis(gcols, (-5, -4), (-2, -1)))  # (..., cin, 3, 3, ho, wo)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gxp[..., dy:dy + ho, dx:dx + wo] += gcols[..., dy, dx, :, :]
        gx = gxp[..., padding:padding + h, padding:padding + wd]
        gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# ---------------------------------------------------------------- normalisation

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    c = x.shape[-3] if x.ndim >= 3 else None
    if c is None or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not fit input {x.shape}")
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    m = x.data.size // c
    if m == 0:
        raise ShapeError("batch_norm: zero-size channel")
    bshape = (c, 1, 1)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = gxhat.sum(axis=axes).reshape(bshape)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------- pooling

def _check_div(x: Tensor, k: int, op: str):
    if x.ndim < 2 or x.shape[-1] % k or x.shape[-2] % k:
        raise ShapeError(f"{op}: spatial shape {x.shape[-2:]} not divisible by {k}")


def _to_blocks(a: np.ndarray, k: int) -> np.ndarray:
    *lead, h, w = a.shape
    return np.moveaxis(a.reshape(*lead, h // k, k, w // k, k), -3, -2).reshape(*lead, h // k, w // k, k * k)


def _from_blocks(b: np.ndarray, k: int) -> np.ndarray:
    *lead, h, w, _ = b.shape
    return np.moveaxis(b.reshape(*lead, h, w, k, k), -2, -3).reshape(*lead, h * k, w * k)


def _up(a: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(a, k, axis=-2), k, axis=-1)


def avg_pool(x: Tensor, k: int) -> Tensor:
    _check_div(x, k, "avg_pool")
    if k == 1:
        return x
    out = _to_blocks(x.data, k).mean(-1)
    inv = x.dtype.type(1.0 / (k * k))
    return _make(out, (x,), lambda g: (_up(g * inv, k),))


def min_pool(x: Tensor, k: int) -> Tensor:
    """Block minimum; the gradient goes to the first minimum in row-major order."""
    _check_div(x, k, "min_pool")
    if k == 1:
        return x
    b = _to_blocks(x.data, k)
    idx = b.argmin(-1)[..., None]
    out = np.take_along_axis(b, idx, -1)[..., 0]

    def backward(g):
        gb = np.zeros_like(b)
        np.put_along_axis(gb, idx, g[..., None], -1)
        return (_from_blocks(gb, k),)

    return _make(out, (x,), backward)


def nearest_upsample(x: Tensor, k: int) -> Tensor:
    if k == 1:
        return x
    return _make(_up(x.data, k), (x,), lambda g: (_to_blocks(g, k).sum(-1),))


@lru_cache(maxsize=None)
def adaptive_pool_matrix(size: int, n: int) -> np.ndarray:
    """(n, size) row-averaging matrix over bins ``floor(i*size/n) .. ceil((i+1)*size/n)``."""
    m = np.zeros((n, size))
    for i in range(n):
        lo = (i * size) // n
        hi = -((-(i + 1) * size) // n)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def adaptive_avg_pool(x: Tensor, n: int) -> Tensor:
    h, w = x.shape[-2:]
    if n < 1 or n > h or n > w:
        raise ShapeError(f"adaptive_avg_pool: output size {n} exceeds spatial shape {(h, w)}")
    ph = adaptive_pool_matrix(h, n).astype(x.dtype)
    pw = adaptive_pool_matrix(w, n).astype(x.dtype)
    out = ph @ x.data @ pw.T
    return _make(out, (x,), lambda g: (ph.T @ g @ pw,))


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    Shapes ``q: (..., N, d)``, ``k: (..., M, d)``, ``v: (..., M, d_v)``.
    """
    if (q.ndim < 2 or q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]
            or q.shape[-1] != k.shape[-1]):
        raise ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    c = q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    kt = np.swapaxes(k.data, -1, -2)
    s = (q.data @ kt) * c
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    out = a @ v.data

    def backward(g):
        ga = g @ np.swapaxes(v.data, -1, -2)
        gv = np.swapaxes(a, -1, -2) @ g
        gs = a * (ga - (ga * a).sum(-1, keepdims=True)) * c
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------- losses

def masked_ce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross entropy over non-DONT_CARE targets.

    ``logits`` is ``(..., C, h, w)`` and ``target`` ``(..., h, w)``.  With
    no supervised entry the result is a constant zero.
    """
    target = np.asarray(target)
    C = logits.shape[-3]
    if logits.shape[:-3] + logits.shape[-2:] != target.shape:
        raise ShapeError(f"masked_ce: logits {logits.shape} do not match targets {target.shape}")
    mask = target != DONT_CARE
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    if target[mask].max() >= C or target[mask].min() < 0:
        raise IndexError(f"masked_ce: target id outside [0, {C})")
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=-3, keepdims=True)
    logp = z - np.log(se)
    safe = np.expand_dims(np.where(mask, target, 0), -3)
    picked = np.take_along_axis(logp, safe, -3)
    loss = -(picked[..., 0, :, :][mask]).sum() / n

    def backward(g):
        p = e / se
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe, 1, -3)
        gl = (p - onehot) * np.expand_dims(mask, -3) * (g / n)
        return (gl.astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def masked_bce(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy over UNITY (target 1) and MIX (target 0) cells."""
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ShapeError(f"masked_bce: probabilities {probs.shape} do not match targets {target.shape}")
    mask = (target == UNITY) | (target == MIX)
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=probs.dtype))
    pos = target == UNITY
    inside = (probs.data > BCE_EPS) & (probs.data < 1 - BCE_EPS)
    p = np.clip(probs.data.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
    terms = np.where(pos, -np.log(p), -np.log1p(-p))
    loss = terms[mask].sum() / n

    def backward(g):
        d = np.where(pos, -1 / p, 1 / (1 - p)) * mask * inside * (g / n)
        return (d.astype(probs.dtype),)

    return _make(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


# ---------------------------------------------------------------- initialisation & checking

def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    The relative error of one coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    Parameters should hold float64 data.
    """
    params = list(params)
    zero_grad(params)
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: objective is not finite")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite objective perturbing {p.name}[{i}]")
            fd = (fp - fm) / (2 * step)
            a = float(gflat[i])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            worst = max(worst, err)
    return worst
