"""Dense tensors with reverse-mode automatic differentiation.

Only the operations SPANet needs are provided. Arrays are row-major
``N, C, H, W``; convolution is cross-correlation. Every op returns a new
``Tensor``; parameters are mutated only by :class:`SGD`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


class DegenerateBatchError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def sequential():
    """Strict sequential mode: BLAS pinned to one thread so reductions run in a fixed order."""
    with threadpool_limits(limits=1):
        yield


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar, used mostly by tests and losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Operations reachable from a root, in topological order (producers first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ``requires_grad`` tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}", axis=axis)
    axis %= ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError("concat operands differ in rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat operands differ on axis {ax}: {tensors[0].shape} vs {t.shape}", axis=ax)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# --------------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"linear expects [N,F], got {x.shape}", axis=0)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}", axis="F")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({wd.shape[0]},)", axis="G")
        out = out + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}", axis="N")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight expects [O,C,kH,kW], got {weight.shape}", axis="O")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has C={c}, weight expects C={wc}", axis="C")
    if h + 2 * padding < kh:
        raise ShapeError(f"conv2d: padded height {h + 2 * padding} < kernel height {kh}", axis="H")
    if w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded width {w + 2 * padding} < kernel width {kw}", axis="W")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)", axis="O")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); columns: (c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    xshape, pshape = x.shape, xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(pshape, dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; ties route the gradient to the first index."""
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: input {h}x{w} smaller than window {k}", axis="H" if h < k else "W")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # flat index of each winner in x
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di
    colsj = np.arange(wo)[None, :] * stride + dj
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    idx = (plane + rows * w + colsj).ravel()
    size, shape = x.size, x.shape

    def bw(g):
        return (np.bincount(idx, weights=g.ravel(), minlength=size).astype(g.dtype).reshape(shape),)

    return _make(np.ascontiguousarray(out), (x,), bw)


class BatchNormState:
    """Running statistics of one batchnorm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)", axis="C")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(state.var.astype(x.dtype) + eps)
        xhat = (x.data - state.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * g4 + b4

        def bw_eval(g):
            return (g * (g4 * inv.reshape(1, c, 1, 1)), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _make(out, (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError("batchnorm2d in train mode needs at least two values per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g4 + b4
    state.mean = ((1 - momentum) * state.mean + momentum * mu.ravel()).astype(state.mean.dtype)
    state.var = ((1 - momentum) * state.var + momentum * var.ravel() * m / (m - 1)).astype(state.var.dtype)

    def bw(g):
        dxhat = g * g4
        dx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, gamma, beta), bw)


def smooth_l1_loss(pred: Tensor, target) -> Tensor:
    """Mean over elements of 0.5 d^2 where |d| < 1, else |d| - 0.5."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < 1.0
    loss = np.where(small, 0.5 * d * d, ad - 0.5).mean()
    n = d.size

    def bw(g):
        gd = np.where(small, d, np.sign(d)) * (g / n)
        return gd, -gd

    return _make(np.asarray(loss, dtype=pred.dtype), (pred, target), bw)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax over ``axis`` (plain numpy, no tape)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class SGD:
    """SGD with heavy-ball momentum: ``v = m*v + g; p -= lr*v``; grads zeroed after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is not None:
                if p.grad.shape != p.data.shape:
                    raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
                v *= self.momentum
                v += p.grad
            else:
                v *= self.momentum
            p.data -= (self.lr * v).astype(p.data.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], velocity: Sequence[np.ndarray], learning_rate: float,
             momentum: float = 0.0) -> None:
    """Functional form of one SGD step over ``params`` using their ``grad`` buffers."""
    opt = SGD(params, learning_rate, momentum)
    opt.velocity = list(velocity)
    opt.step()
