"""Tape-based reverse-mode differentiation over a closed set of ops.

Feature maps are ``(N, H, W, C)`` arrays. A :class:`Tape` records nodes in
creation order; :func:`backward` walks them in reverse, so fan-out gradients
are accumulated in a fixed order and results are bitwise reproducible.

Example::

    tape = Tape()
    w = tape.param(np.array(3.0), "w")
    loss = mse(w, tape.constant(np.array(0.0)))
    backward(tape, loss)["w"]        # array(6.)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import UpsampleOp, apply_upsample, build_upsample_op

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "grad", "vjp", "name")

    def __init__(self, tape, id, op, inputs, value, vjp=None, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Append-only list of nodes; one tape per forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []

    def _record(self, op, inputs, value, vjp=None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), op, tuple(inputs), value, vjp, name)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Node:
        node = self._record("param", (), np.array(value, dtype=np.float64), name=name)
        self.param_ids.append(node.id)
        return node

    def constant(self, value) -> Node:
        return self._record("const", (), value)

    def release(self) -> None:
        """Drop every node. Nodes and their backward closures reference the
        tape, so without this the arrays wait for the cyclic collector."""
        for node in self.nodes:
            node.inputs, node.vjp, node.grad = (), None, None
        self.nodes.clear()
        self.param_ids.clear()


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("nodes belong to different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_nhwc(x: Node, op: str) -> None:
    if x.value.ndim != 4:
        raise ValueError(f"{op}: expected (N, H, W, C) input, got shape {x.shape}")


# --------------------------------------------------------------------- ops


def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    if value.shape != a.shape and value.shape != b.shape:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return tape._record("add", (a, b), value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return tape._record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._record("scale", (a,), a.value * c, lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape._record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def total(nodes: Sequence[Node]) -> Node:
    """Sum of scalar nodes."""
    if not nodes:
        raise ValueError("total: empty sequence")
    for n in nodes:
        if n.value.size != 1:
            raise ValueError(f"total: expected scalars, got shape {n.shape}")
    tape = _tape_of(*nodes)
    value = np.array(0.0)
    for n in nodes:
        value = value + n.value.reshape(())
    shapes = [n.shape for n in nodes]
    return tape._record("sum", nodes, value, lambda g: [np.broadcast_to(g, s).copy() for s in shapes])


def sum_squares(a: Node) -> Node:
    """Squared Frobenius norm."""
    return a.tape._record("sumsq", (a,), np.sum(a.value * a.value), lambda g: (2.0 * g * a.value,))


def mse(a: Node, b: Node, n: float = 1.0) -> Node:
    """``sum((a - b)**2) / n``; pass the batch size as ``n`` for a per-sample mean."""
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    inv = 1.0 / float(n)

    def vjp(g):
        d = 2.0 * inv * g * diff
        return d, -d

    return tape._record("mse", (a, b), np.sum(diff * diff) * inv, vjp)


def stop_gradient(x: Node) -> Node:
    """Forward identity; contributes no gradient to ``x`` or its ancestors."""
    return x.tape._record("stop_gradient", (x,), x.value.copy(), lambda g: (None,))


def conv2d(x: Node, k: Node, stride: int = 1, padding: int = 0) -> Node:
    """Dense convolution. ``x`` is ``(N, H, W, Cin)``, ``k`` is ``(kh, kw, Cin, Cout)``."""
    tape = _tape_of(x, k)
    _require_nhwc(x, "conv2d")
    if k.value.ndim != 4 or k.shape[2] != x.shape[3]:
        raise ValueError(f"conv2d: kernel {k.shape} incompatible with input {x.shape}")
    kh, kw, cin, cout = k.shape
    n, h, w, _ = x.shape
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # (N, Ho, Wo, Cin, kh, kw) -> (N, Ho, Wo, kh, kw, Cin)
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3))
    flat = cols.reshape(n * ho * wo, kh * kw * cin)
    kmat = k.value.reshape(kh * kw * cin, cout)
    value = (flat @ kmat).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        dk = (flat.T @ g2).reshape(k.shape)
        dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
        return dxp[:, padding : padding + h, padding : padding + w, :], dk

    return tape._record("conv2d", (x, k), value, vjp)


def depthwise_conv3x3(x: Node, k: Node) -> Node:
    """Per-channel 3x3 convolution with zero padding 1. ``k`` is ``(3, 3, C)``."""
    tape = _tape_of(x, k)
    _require_nhwc(x, "depthwise_conv3x3")
    if k.shape != (3, 3, x.shape[3]):
        raise ValueError(f"depthwise_conv3x3: kernel {k.shape} incompatible with input {x.shape}")
    _, h, w, _ = x.shape
    xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1), (0, 0)))
    value = np.zeros_like(x.value)
    for i in range(3):
        for j in range(3):
            value += xp[:, i : i + h, j : j + w, :] * k.value[i, j]

    def vjp(g):
        dk = np.empty_like(k.value)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dk[i, j] = np.einsum("nhwc,nhwc->c", xp[:, i : i + h, j : j + w, :], g)
                dxp[:, i : i + h, j : j + w, :] += g * k.value[i, j]
        return dxp[:, 1 : 1 + h, 1 : 1 + w, :], dk

    return tape._record("depthwise_conv3x3", (x, k), value, vjp)


def pointwise_conv1x1(x: Node, k: Node) -> Node:
    """Channel mixing. ``k`` is ``(Cin, Cout)``."""
    tape = _tape_of(x, k)
    _require_nhwc(x, "pointwise_conv1x1")
    if k.value.ndim != 2 or k.shape[0] != x.shape[3]:
        raise ValueError(f"pointwise_conv1x1: kernel {k.shape} incompatible with input {x.shape}")
    n, h, w, cin = x.shape
    xf = x.value.reshape(-1, cin)
    value = (xf @ k.value).reshape(n, h, w, k.shape[1])

    def vjp(g):
        gf = g.reshape(-1, k.shape[1])
        return (gf @ k.value.T).reshape(x.shape), xf.T @ gf

    return tape._record("pointwise_conv1x1", (x, k), value, vjp)


def upsample(x: Node, op: UpsampleOp) -> Node:
    """Apply a fixed :class:`UpsampleOp` to the spatial grid of ``(N, h, w, C)``."""
    _require_nhwc(x, "upsample")
    n, h, w, c = x.shape
    if (h, w) != (op.src_h, op.src_w):
        raise ValueError(f"upsample: input grid {h}x{w} does not match operator source {op.src_h}x{op.src_w}")
    flat = x.value.reshape(n, h * w, c)
    value = apply_upsample(op, flat).reshape(n, op.dst_h, op.dst_w, c)
    mt = op.matrix.T.tocsr()

    def vjp(g):
        gf = g.reshape(n, op.dst_size, c)
        dx = np.stack([mt @ gf[i] for i in range(n)])
        return (dx.reshape(x.shape),)

    return x.tape._record("upsample", (x,), value, vjp)


def bilinear_upsample(x: Node, factor: int) -> Node:
    _require_nhwc(x, "bilinear_upsample")
    _, h, w, _ = x.shape
    return upsample(x, build_upsample_op(h, w, h * factor, w * factor))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Node) -> dict:
    """Gradients of scalar ``loss`` for every parameter on ``tape``.

    Returns a dict keyed by parameter name (or node id when unnamed).
    Parameters the loss does not depend on get zero arrays.
    """
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.inputs, node.vjp(node.grad)):
            if g is None:
                continue
            if g.shape != parent.value.shape:
                g = g.reshape(parent.value.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    grads = {}
    for pid in tape.param_ids:
        p = tape.nodes[pid]
        key = p.name if p.name is not None else pid
        grads[key] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return grads
