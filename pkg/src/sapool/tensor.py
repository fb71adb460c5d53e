"""Dense tensors with reverse-mode differentiation.

Storage is a numpy array.  Every differentiable operation returns a new
:class:`Tensor` whose ``_node`` records the parents and a backward rule that
maps the output gradient to one gradient per parent.  :class:`Tape` orders
the recorded nodes topologically so a backward pass visits each exactly once.

Precision defaults to float32; wrap code in ``precision("f64")`` for the
64-bit mode used by gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {"dtype": np.float32, "grad": True, "debug": False, "hook": None}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    old = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = old


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def op_hook(fn: Callable):
    """Call ``fn(op, parents, out)`` after every operation while active."""
    old = _state["hook"]
    _state["hook"] = fn
    try:
        yield
    finally:
        _state["hook"] = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf while active."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


def is_debug() -> bool:
    return _state["debug"]


class Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    """N-dimensional array of reals with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` and, when gradients are needed, record the op."""
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._retain = False
    out.name = None
    need = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = need
    out._node = Node(tuple(parents), backward_fn, op) if need else None
    if _state["hook"] is not None:
        _state["hook"](op, parents, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, in topological order.

    ``nodes`` lists tensors so that every tensor's parents come before it.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, visit: Callable[[Tensor], None] | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf on the path.

    Non-leaf tensors keep their gradient only if ``retain_grad`` was called.
    ``visit`` is invoked once per tensor in the order gradients are finalised.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if visit is not None:
            visit(t)
        if g is None:
            continue
        node = t._node
        if node is None or t._retain:
            t.grad = g if t.grad is None else t.grad + g
        if node is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return _result(ad**p, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _result(np.log(ad), (a,), bw, "log")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form cannot overflow for any finite input
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bw, "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), bw, "relu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batched leading dimensions (numpy semantics)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for weight stored as [out, in]."""
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling primitives
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with [Cout, Cin, k, k] weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape} (padding {padding})")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xd, wd = x.data, w.data

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        w2 = wd.reshape(Cout, Cin)
        out = np.einsum("oc,bchw->bohw", w2, xs, optimize=True)
        if b is not None:
            out += b.data.reshape(1, -1, 1, 1)
        parents = (x, w) if b is None else (x, w, b)

        def bw1(g):
            gx = gw = None
            if x.requires_grad:
                gxs = np.einsum("oc,bohw->bchw", w2, g, optimize=True)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            if w.requires_grad:
                gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True).reshape(wd.shape)
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        return _result(out, parents, bw1, "conv2d")

    # channel-major copy of the padded input; every window slice is then a plain strided view
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2 = wd.reshape(Cout, -1)
    out = (w2 @ cols).reshape(Cout, B, Ho, Wo)
    if b is not None:
        out += b.data.reshape(-1, 1, 1, 1)
    out = out.transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, b)
    padded_shape = xt.shape

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, B * Ho * Wo)
        gx = gw = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxt = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            if padding:
                gxt = gxt[:, :, padding : padding + H, padding : padding + W]
            gx = gxt.transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, bw, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation with [C, 1, k, k] weights."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    B, C, H, W = x.shape
    k = w.shape[2]
    if H + 2 * padding < k or W + 2 * padding < k:
        raise DimensionError(f"depthwise_conv2d kernel {k}x{k} larger than padded input {x.shape}")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = w.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] * wd[:, i, j].reshape(1, C, 1, 1)
    if b is not None:
        out += b.data.reshape(1, C, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * wd[:, i, j].reshape(
                        1, C, 1, 1
                    )
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                    gw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, bw, "depthwise_conv2d")


def _check_windows(x: Tensor, s: int, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects NCHW input, got {x.shape}")
    if s < 1 or x.shape[2] % s or x.shape[3] % s:
        raise DimensionError(f"{op}: spatial size {x.shape[2:]} not divisible by stride {s}")


def window_sum(x: Tensor, s: int) -> Tensor:
    """Sum over non-overlapping s x s windows (kernel = stride = s)."""
    _check_windows(x, s, "window_sum")
    B, C, H, W = x.shape
    if s == 1:
        return x
    out = x.data.reshape(B, C, H // s, s, W // s, s).sum(axis=(3, 5))

    def bw(g):
        return (np.broadcast_to(g[:, :, :, None, :, None], (B, C, H // s, s, W // s, s)).reshape(B, C, H, W).copy(),)

    return _result(out, (x,), bw, "window_sum")


def avg_pool2d(x: Tensor, s: int) -> Tensor:
    _check_windows(x, s, "avg_pool2d")
    if s == 1:
        return x
    return window_sum(x, s) * (1.0 / (s * s))


def max_pool2d(x: Tensor, s: int) -> Tensor:
    _check_windows(x, s, "max_pool2d")
    if s == 1:
        return x
    B, C, H, W = x.shape
    blocks = x.data.reshape(B, C, H // s, s, W // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // s, W // s, s * s)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // s, W // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _result(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(n), labels))
    return mean(picked) * -1.0


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation of NCHW input.

    In training mode the running statistics are updated in place; the running
    variance uses the unbiased batch estimate.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    n = B * H * W
    if n < 1:
        raise DimensionError(f"batchnorm2d: channel has zero elements for input {x.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, C, 1, 1).astype(xd.dtype)) * invstd.reshape(1, C, 1, 1)
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (invstd.reshape(1, C, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(1, C, 1, 1)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw, "batchnorm2d")


LN_EPS = 1e-5


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis."""
    xd = x.data
    C = xd.shape[-1]
    if C < 1:
        raise DimensionError("layernorm needs at least one channel")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = (invstd / C) * (
                C * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw, "layernorm")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """[dst, src] interpolation weights, half-pixel centres, edge clamping."""
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1)
        i0 = int(math.floor(pos))
        i1 = min(i0 + 1, src - 1)
        lam = pos - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize NCHW input to ``size`` = (h, w) with h, w >= the source extents."""
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    h, w = size
    hs, ws = x.shape[2], x.shape[3]
    if h < hs or w < ws:
        raise DimensionError(f"bilinear_upsample target {size} smaller than source {(hs, ws)}")
    if (h, w) == (hs, ws):
        return x
    ah = bilinear_matrix(hs, h, x.dtype)
    aw = bilinear_matrix(ws, w, x.dtype)
    out = np.einsum("ip,bcpq,jq->bcij", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ip,bcij,jq->bcpq", ah, g, aw, optimize=True),)

    return _result(out, (x,), bw, "bilinear_upsample")


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
