"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are recorded eagerly: every operation on a :class:`Tensor` evaluates
immediately and, when any input requires a gradient, keeps a reference to
its inputs together with a closure mapping the upstream gradient to one
gradient per input. :func:`gradients` walks that record in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "no_grad",
    "custom_op",
    "stop_gradient",
    "gradients",
    "finite_diff",
    "linear",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sigmoid",
    "relu",
    "swish",
    "glu",
    "depthwise_conv1d",
    "take",
    "exp",
    "log",
]


class GraphError(Exception):
    """Base class for errors raised while building or differentiating a graph."""


class ShapeError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, OverflowError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _describe(t: "Tensor") -> str:
    label = t.name or t.op
    return f"{label}{list(t.data.shape)}"


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "backward_fn", "sg_source", "grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in leaf {name or '<unnamed>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.sg_source = None
        self.grad = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({_describe(self)}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf (scalar outputs only)."""
        grads = _backprop(self)
        for leaf, g in grads.values():
            leaf.grad = g


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        desc = ", ".join(_describe(p) for p in parents)
        raise NonFiniteError(f"{op} produced a non-finite value (inputs: {desc})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    out.sg_source = None
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def custom_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a precomputed forward value with a hand-written backward rule.

    ``backward`` receives the upstream gradient and returns one gradient (or
    ``None``) per entry of ``inputs``.
    """
    return _node(np.asarray(data, dtype=np.float64), tuple(inputs), backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {_describe(a)} and {_describe(b)}") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _node(out, (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _node(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "swish")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid(second half)."""
    n = x.data.shape[-1]
    if n % 2:
        raise ShapeError(f"glu: last axis of {_describe(x)} must be even")
    a, b = x.data[..., : n // 2], x.data[..., n // 2 :]
    s = 1.0 / (1.0 + np.exp(-b))

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return _node(a * s, (x,), backward, "glu")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {_describe(a)} and {_describe(b)}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as [out, in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {_describe(x)} does not match weight {_describe(w)}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {_describe(b)} does not match weight {_describe(w)}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
    n_out, n_in = wd.shape

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, n_out).T @ xd.reshape(-1, n_in) if w.requires_grad else None
        gb = g.reshape(-1, n_out).sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward, "linear")


# -- reductions and reshaping -------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {_describe(x)} as {list(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(x.data[index]), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.data.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(np.take(x.data, idx, axis=axis), (x,), backward, "take")


# -- normalisation ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; a zero-variance row maps to ``beta``."""
    n = x.data.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine {_describe(gamma)} does not match input {_describe(x)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        gx = None
        if x.requires_grad:
            gx = rstd / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0) if gamma.requires_grad else None
        gbeta = flat_g.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _node(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- convolution --------------------------------------------------------------


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded depthwise convolution over time.

    ``x`` is [batch, time, channels], ``w`` is [channels, kernel] with an odd
    kernel; out[b, t, c] = sum_k x[b, t + k - K//2, c] * w[c, k].
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2] or w.shape[1] % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: input {_describe(x)} incompatible with kernel {_describe(w)}")
    _, T, _ = x.data.shape
    K = w.shape[1]
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    wd = w.data
    out = xp[:, 0:T, :] * wd[:, 0]
    for k in range(1, K):
        out = out + xp[:, k : k + T, :] * wd[:, k]
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k : k + T, :] += g * wd[:, k]
            gx = gxp[:, pad : pad + T, :]
        if w.requires_grad:
            gw = np.stack([(g * xp[:, k : k + T, :]).sum(axis=(0, 1)) for k in range(K)], axis=1)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward, "depthwise_conv1d")


# -- gradient control -----------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass, a constant in the backward pass.

    The returned node keeps ``sg_source`` pointing at ``x`` so graph
    inspection can see what was cut, but it has no gradient-carrying parents.
    """
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.name = None
    out.op = "stop_gradient"
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    out.sg_source = x
    out.grad = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise ShapeError(f"gradients: loss must be scalar, got {_describe(loss)}")
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = (node, np.asarray(g))
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar ``loss``.

    Parameters that the loss does not reach get an all-zero gradient.
    """
    found = _backprop(loss)
    out = {}
    for name, p in params.items():
        hit = found.get(id(p))
        out[name] = np.array(hit[1], dtype=np.float64).reshape(p.shape) if hit else np.zeros(p.shape)
    return out


def reachable(root: Tensor) -> list[Tensor]:
    """Every node whose value can receive gradient from ``root``."""
    return _toposort(root)


def finite_diff(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``fn`` at ``point``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    out = {}
    for name in names if names is not None else base:
        arr = base[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(base))
            flat[i] = orig - eps
            lo = float(fn(base))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = g
    return out
