"""Minimal reverse-mode autodiff over numpy arrays.

Scope is deliberately narrow: exactly the operations the immunizer
network, the loss terms, the surrogate editors, and the gradient-based
attacks need. Convolutions dispatch to :mod:`imshield.kernels`; every
other op is plain numpy.

Gradient conventions that matter to callers:

* ``clamp01`` passes gradient where the pre-clamp value lies in [0, 1]
  and zeroes it at saturated entries.
* ``abs_`` uses sign(x) with sign(0) = 0 at the kink.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class Tensor:
    """A node in the backward graph wrapping an ndarray value."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        bwd: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value: np.ndarray) -> Tensor:
    """A gradient-accumulating input (model parameter or attacked pixels)."""
    return Tensor(np.asarray(value), requires_grad=True)


def const(value: np.ndarray) -> Tensor:
    """A constant input; no gradient is accumulated into it."""
    return Tensor(np.asarray(value))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return const(np.asarray(x))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(value, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(value, (a, b), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    value = kernels.conv2d_forward(x.value, w.value, b.value)
    kh, kw = w.value.shape[2], w.value.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, w.value) if x.requires_grad else None
        if w.requires_grad or b.requires_grad:
            gw, gb = kernels.conv2d_backward_weights(x.value, g, kh, kw)
        else:
            gw = gb = None
        return gx, gw, gb

    return Tensor(value, (x, w, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.value > 0
    value = np.where(pos, x.value, slope * x.value)

    def bwd(g):
        return (np.where(pos, g, slope * g),)

    return Tensor(value, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    value = np.tanh(x.value)

    def bwd(g):
        return (g * (1.0 - value * value),)

    return Tensor(value, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    value = 1.0 / (1.0 + np.exp(-x.value))

    def bwd(g):
        return (g * value * (1.0 - value),)

    return Tensor(value, (x,), bwd)


def clamp01(x: Tensor) -> Tensor:
    value = np.clip(x.value, 0.0, 1.0)
    inside = (x.value >= 0.0) & (x.value <= 1.0)

    def bwd(g):
        return (g * inside,)

    return Tensor(value, (x,), bwd)


def exp_(x: Tensor) -> Tensor:
    value = np.exp(x.value)

    def bwd(g):
        return (g * value,)

    return Tensor(value, (x,), bwd)


def min_const(x: Tensor, cap: float) -> Tensor:
    """Elementwise min(x, cap); gradient passes where x <= cap."""
    value = np.minimum(x.value, cap)
    below = x.value <= cap

    def bwd(g):
        return (g * below,)

    return Tensor(value, (x,), bwd)


def abs_(x: Tensor) -> Tensor:
    value = np.abs(x.value)
    sgn = np.sign(x.value)

    def bwd(g):
        return (g * sgn,)

    return Tensor(value, (x,), bwd)


def square(x: Tensor) -> Tensor:
    value = x.value * x.value

    def bwd(g):
        return (2.0 * g * x.value,)

    return Tensor(value, (x,), bwd)


def sum_(x: Tensor) -> Tensor:
    value = np.asarray(x.value.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.value.shape).astype(x.value.dtype, copy=True),)

    return Tensor(value, (x,), bwd)


def mean_(x: Tensor) -> Tensor:
    n = x.value.size
    return mul(sum_(x), 1.0 / n)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling on (N, C, H, W); H and W must be even."""
    n, c, h, w = x.value.shape
    value = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return Tensor(value, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling on (N, C, H, W)."""
    value = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        gx = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        return (gx,)

    return Tensor(value, (x,), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=1)
    splits = np.cumsum([x.value.shape[1] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return Tensor(value, tuple(xs), bwd)


def spatial_masked_mean(x: Tensor, mask2d: np.ndarray) -> Tensor:
    """Per-channel mean of (N, C, H, W) over a binary 2-D region.

    Returns a (N, C, 1, 1) tensor. ``mask2d`` is a constant (H, W) array
    with at least one nonzero entry.
    """
    count = float(mask2d.sum())
    m = mask2d[None, None, :, :]
    value = (x.value * m).sum(axis=(2, 3), keepdims=True) / count

    def bwd(g):
        return (g / count * m * np.ones_like(x.value),)

    return Tensor(value, (x,), bwd)


def from_vjp(out_value: np.ndarray, vjp: Callable[[np.ndarray], np.ndarray], parent: Tensor) -> Tensor:
    """Wrap an external differentiable computation as a graph node.

    ``vjp`` maps an upstream gradient w.r.t. ``out_value`` to the gradient
    w.r.t. ``parent.value``. Used to splice editing backends into the
    training graph.
    """

    def bwd(g):
        return (vjp(g),)

    return Tensor(np.asarray(out_value), (parent,), bwd)


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar ``out`` into all reachable leaves."""
    if out.value.ndim != 0:
        raise ValueError("backward() expects a scalar tensor")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
