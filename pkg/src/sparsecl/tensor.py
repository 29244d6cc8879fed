"""Dense float64 tensor ops with a minimal reverse-mode gradient tape.

The op set is fixed to what the networks in this library need: 2D
convolution (stride 1, "same" padding), ReLU, 2x2 max pooling, flatten,
a dense affine map and softmax cross entropy.  Activations are NHWC,
kernels are (kh, kw, c_in, c_out), everything is 64-bit.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InputError, ShapeError, StateError

__all__ = [
    "Node",
    "Tape",
    "backward",
    "conv2d",
    "dense",
    "flatten",
    "maxpool2x2",
    "relu",
    "softmax_cross_entropy",
]


class Node:
    """A value in a computation, with space for its gradient.

    ``needs_grad=False`` marks constants (e.g. input batches) so the
    backward pass can skip computing their gradients.
    """

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, needs_grad: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def add_grad_at(self, index, g: np.ndarray) -> None:
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[index] += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(shape={self.data.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Ordered record of primitive ops; replayed in reverse by backward()."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def record(self, op: Callable[[], None]) -> None:
        self._ops.append(op)

    def __len__(self) -> int:
        return len(self._ops)


def backward(tape: Tape, loss: Node) -> None:
    """Run reverse-mode differentiation, accumulating into Node.grad.

    The loss must be a scalar recorded on ``tape``.  Raises StateError on
    an empty tape (nothing was recorded).
    """
    if len(tape) == 0:
        raise StateError("cannot run backward on an empty tape")
    if loss.data.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.array(1.0)
    for op in reversed(tape._ops):
        op()


def _same_padding(k: int) -> tuple[int, int]:
    # total padding k-1, split with the extra row/col trailing (even kernels)
    before = (k - 1) // 2
    return before, (k - 1) - before


def conv2d(tape: Tape, x: Node, kernel: Node, bias: Node) -> Node:
    """Stride-1 "same" cross-correlation plus per-filter bias.

    x: (N, H, W, c_in), kernel: (kh, kw, c_in, c_out), bias: (c_out,).
    Output spatial dims equal the input's; each output channel is one
    filter's pre-nonlinearity activation map.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NHWC, got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {kernel.data.shape}")
    n, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, batch has {cin}")
    if kh > h or kw > w:
        raise ShapeError(
            f"kernel spatial dims ({kh}x{kw}) exceed input dims ({h}x{w})"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")

    ph0, ph1 = _same_padding(kh)
    pw0, pw1 = _same_padding(kw)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    out = np.broadcast_to(bias.data, (n, h, w, cout)).copy()
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy : dy + h, dx : dx + w, :].reshape(-1, cin)
            out += (patch @ kernel.data[dy, dx]).reshape(n, h, w, cout)
    y = Node(out, needs_grad=x.needs_grad or kernel.needs_grad or bias.needs_grad)

    def _backward():
        if y.grad is None:
            return
        g = y.grad
        bias.add_grad(g.sum(axis=(0, 1, 2)))
        g2 = g.reshape(-1, cout)
        if kernel.needs_grad:
            for dy in range(kh):
                for dx in range(kw):
                    patch = xp[:, dy : dy + h, dx : dx + w, :].reshape(-1, cin)
                    kernel.add_grad_at((dy, dx), patch.T @ g2)
        if x.needs_grad:
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy : dy + h, dx : dx + w, :] += (
                        g2 @ kernel.data[dy, dx].T
                    ).reshape(n, h, w, cin)
            x.add_grad(gxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :])

    tape.record(_backward)
    return y


def relu(tape: Tape, x: Node) -> Node:
    """Elementwise max(0, x)."""
    y = Node(np.maximum(x.data, 0.0), needs_grad=x.needs_grad)

    def _backward():
        if y.grad is None or not x.needs_grad:
            return
        x.add_grad(y.grad * (x.data > 0.0))

    tape.record(_backward)
    return y


def maxpool2x2(tape: Tape, x: Node) -> Node:
    """2x2 max pooling, stride 2; odd trailing rows/cols are truncated."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be 4-D NHWC, got {x.data.shape}")
    n, h, w, c = x.data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"spatial dims too small to pool: {h}x{w}")
    xt = x.data[:, : 2 * h2, : 2 * w2, :]
    win = (
        xt.reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    y = Node(out, needs_grad=x.needs_grad)

    def _backward():
        if y.grad is None or not x.needs_grad:
            return
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], y.grad[..., None], axis=4)
        gx = np.zeros((n, h, w, c))
        gx[:, : 2 * h2, : 2 * w2, :] = (
            gwin.reshape(n, h2, w2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, 2 * h2, 2 * w2, c)
        )
        x.add_grad(gx)

    tape.record(_backward)
    return y


def flatten(tape: Tape, x: Node) -> Node:
    """Collapse all non-batch dims into one."""
    n = x.data.shape[0]
    y = Node(x.data.reshape(n, -1), needs_grad=x.needs_grad)

    def _backward():
        if y.grad is None or not x.needs_grad:
            return
        x.add_grad(y.grad.reshape(x.data.shape))

    tape.record(_backward)
    return y


def dense(tape: Tape, x: Node, weight: Node, bias: Node) -> Node:
    """Affine map: x @ weight + bias, x is (N, D), weight (D, M)."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense input must be 2-D, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"dense: input dim {x.data.shape[1]} != weight rows {weight.data.shape[0]}"
        )
    y = Node(
        x.data @ weight.data + bias.data,
        needs_grad=x.needs_grad or weight.needs_grad or bias.needs_grad,
    )

    def _backward():
        if y.grad is None:
            return
        g = y.grad
        weight.add_grad(x.data.T @ g)
        bias.add_grad(g.sum(axis=0))
        if x.needs_grad:
            x.add_grad(g @ weight.data.T)

    tape.record(_backward)
    return y


def softmax_cross_entropy(tape: Tape, logits: Node, labels) -> Node:
    """Mean cross entropy of softmax(logits) against integer labels.

    Accepts a (N, C) batch with (N,) labels or a single (C,) vector with a
    scalar label.  Stabilized by max subtraction; the gradient landing on
    ``logits`` is (softmax - onehot) / N.
    """
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    elif z.ndim != 2:
        raise ShapeError(f"logits must be 1-D or 2-D, got {logits.data.shape}")
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    n, c = z.shape
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")

    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = Node(-logp[np.arange(n), y].mean(), needs_grad=logits.needs_grad)

    def _backward():
        if loss.grad is None or not logits.needs_grad:
            return
        probs = np.exp(logp)
        probs[np.arange(n), y] -= 1.0
        g = float(loss.grad) * probs / n
        logits.add_grad(g.reshape(logits.data.shape))

    tape.record(_backward)
    return loss
