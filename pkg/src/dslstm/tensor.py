"""Dense tensors with reverse-mode automatic differentiation.

Every op is a free function that returns a new :class:`Tensor`; when any input
requires a gradient the result records its parents and a closure mapping the
upstream gradient to per-parent gradients. ``Tensor.backward`` walks the
resulting DAG in reverse topological order.

Broadcasting is deliberately absent except for adding a bias vector to a
``(batch, features)`` matrix.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; rebuild it before calling again")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        owned: set[int] = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is not None and parent.requires_grad:
                    _accumulate(grads, owned, parent, pg)
        for node in order:
            node._consumed = True


class SliceGrad:
    """Gradient that is nonzero only on ``parent[index]``; avoids dense zeros per slice."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index, self.value = index, value


def _accumulate(grads: dict, owned: set, parent: "Tensor", pg) -> None:
    # Buffers in ``owned`` were allocated here and may be updated in place;
    # anything else may alias an array held by another node.
    key = id(parent)
    buf = grads.get(key)
    if isinstance(pg, SliceGrad):
        if key not in owned:
            fresh = np.zeros(parent.shape, dtype=pg.value.dtype)
            if buf is not None:
                fresh += buf
            grads[key] = buf = fresh
            owned.add(key)
        if _has_fancy(pg.index):
            np.add.at(buf, pg.index, pg.value)
        else:
            buf[pg.index] += pg.value
    elif buf is None:
        grads[key] = pg
    elif key in owned:
        buf += pg
    else:
        grads[key] = buf + pg
        owned.add(key)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    if _is_bias(a, b):
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "permute")


def getitem(a: Tensor, index) -> Tensor:
    return _result(np.array(a.data[index]), (a,), lambda g: (SliceGrad(index, g),), "getitem")


def _has_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=ax),
        tuple(parts),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
        "concat",
    )


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    ax = axis % a.ndim
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    if start != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"stack: shapes differ ({p.shape} vs {shape})")
    return _result(
        np.stack([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
        "stack",
    )


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    s = _softmax(a.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes - 1}]: {labels.tolist()}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite logits reached the loss")
    s = _softmax(logits.data)
    rows = np.arange(labels.size)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z[rows, labels] - np.log(np.exp(z).sum(axis=-1))
    loss = np.asarray(-logp.mean(), dtype=logits.dtype)

    def backward(g):
        d = s.copy()
        d[rows, labels] -= 1
        return (d * (g / labels.size),)

    return _result(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- convolution / pooling


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation of ``B×C×H×W`` input with ``O×C×kh×kw`` kernels."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: input {H}x{W} smaller than kernel {kh}x{kw}")
    # Pick whichever lowering needs the smaller intermediate buffer.
    if B * H * W * kh * kw * O < B * (H - kh + 1) * (W - kw + 1) * C * kh * kw:
        out, backward = _conv2d_shifted(x, kernel)
    else:
        out, backward = _conv2d_im2col(x, kernel)
    return _result(out, (x, kernel), backward, "conv2d")


def _conv2d_im2col(x: Tensor, kernel: Tensor):
    B, C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
    kmat = kernel.data.reshape(O, C * kh * kw)
    out = (kmat @ cols).reshape(B, O, Ho, Wo)

    def backward(g):
        gflat = g.reshape(B, O, Ho * Wo)
        dk = None
        if kernel.requires_grad:
            dk = (gflat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ gflat).reshape(B, C, kh, kw, Ho, Wo)
            dx = np.zeros(x.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, i, j]
        return dx, dk

    return out, backward


def _conv2d_shifted(x: Tensor, kernel: Tensor):
    # One GEMM of every pixel against every kernel tap, then shifted sums.
    B, C, H, W = x.shape
    O, _, kh, kw = kernel.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    kall = np.ascontiguousarray(kernel.data.transpose(1, 2, 3, 0)).reshape(C, kh * kw * O)
    plane = (xt.reshape(-1, C) @ kall).reshape(B, H, W, kh, kw, O)
    out = np.zeros((B, Ho, Wo, O), dtype=plane.dtype)
    for i in range(kh):
        for j in range(kw):
            out += plane[:, i:i + Ho, j:j + Wo, i, j, :]

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        dplane = np.zeros((B, H, W, kh, kw, O), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dplane[:, i:i + Ho, j:j + Wo, i, j, :] = gt
        dflat = dplane.reshape(-1, kh * kw * O)
        dx = (dflat @ kall.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        dk = None
        if kernel.requires_grad:
            dk = (xt.reshape(-1, C).T @ dflat).reshape(C, kh, kw, O).transpose(3, 0, 1, 2)
        return dx, dk

    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), backward


def maxpool2d(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2; an odd trailing row/column is dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects B×C×H×W, got {x.shape}")
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool2d: spatial dims {H}x{W} below 2")
    Hp, Wp = H // 2, W // 2
    # tile elements in scan order: (0,0), (0,1), (1,0), (1,1)
    taps = [x.data[:, :, di:2 * Hp:2, dj:2 * Wp:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    # first tap equal to the max wins ties
    winner = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        winner[taps[k] == out] = k

    def backward(g):
        dx = np.zeros((B, C, H, W), dtype=g.dtype)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, di:2 * Hp:2, dj:2 * Wp:2] = np.where(winner == k, g, 0)
        return (dx,)

    return _result(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------- batch normalization


@dataclass
class RunningStats:
    """Exponential running mean/variance; the first update adopts the batch statistics outright."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, features: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))

    def update(self, mu: np.ndarray, var: np.ndarray, momentum: float) -> None:
        k = 1.0 if self.updates == 0 else momentum
        self.mean = ((1 - k) * self.mean + k * mu).astype(self.mean.dtype)
        self.var = ((1 - k) * self.var + k * var).astype(self.var.dtype)
        self.updates += 1


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: "RunningStats",
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize ``B×F`` input per feature, then scale by ``gamma`` and shift by ``beta``.

    In training mode the batch statistics are used and ``stats`` is updated in
    place with exponential averaging; in eval mode ``stats`` is read only.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    xd = x.data
    if training:
        if n < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        stats.update(mu, var * n / (n - 1), momentum)
    else:
        mu, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv
    gd, bd = gamma.data, beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _result(xhat * gd + bd, (x, gamma, beta), backward, "batchnorm")


@dataclass
class BatchNormState:
    """Learned affine parameters plus one slot of running statistics."""

    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, features: int, gamma: float = 1.0, beta: float = 0.0, dtype=DEFAULT_DTYPE, **kw):
        return cls(
            gamma=Tensor(np.full(features, gamma, dtype=dtype), requires_grad=True),
            beta=Tensor(np.full(features, beta, dtype=dtype), requires_grad=True),
            stats=RunningStats.fresh(features, dtype),
            **kw,
        )

    @property
    def running_mean(self) -> np.ndarray:
        return self.stats.mean

    @property
    def running_var(self) -> np.ndarray:
        return self.stats.var

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.stats, self.training, self.momentum, self.eps)


# ---------------------------------------------------------------- RNG / init


def child_rng(seed: int, *key: str | int) -> np.random.Generator:
    """Independent, reproducible generator for a named sub-stream of ``seed``."""
    words = [zlib.crc32(str(k).encode()) for k in key]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *words]))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
