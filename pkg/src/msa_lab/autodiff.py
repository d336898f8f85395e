"""Minimal reverse-mode differentiation over numpy arrays.

A Tape records every operation in forward execution order together with the
intermediate values its backward pass needs. Because nodes are appended as
they execute, the reversed tape is already a valid topological order, so
backpropagation is a single reverse sweep. All ops preserve the dtype of
their inputs; training runs in float32, gradient verification in float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: inputs, output, and how to push gradients back."""

    __slots__ = ("name", "inputs", "output", "backward_fn", "replay_fn")

    def __init__(self, name, inputs, output, backward_fn, replay_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn  # grad_out -> tuple of grads aligned with inputs (None = no grad)
        self.replay_fn = replay_fn      # input arrays -> output array, for the replay check


class Tape:
    """Ordered record of forward operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, name: str, inputs: Sequence[Tensor], output_data: np.ndarray,
               backward_fn: Callable, replay_fn: Callable) -> Tensor:
        out = Tensor(output_data, requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(Node(name, tuple(inputs), out, backward_fn, replay_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every reachable requires_grad Tensor."""
        if loss.data.ndim != 0:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.output.grad is None or not node.output.requires_grad:
                continue
            grads = node.backward_fn(node.output.grad)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad

    def replay(self) -> bool:
        """Re-execute every recorded op; True iff all outputs reproduce bitwise."""
        for node in self.nodes:
            redone = node.replay_fn(*[t.data for t in node.inputs])
            if not np.array_equal(np.asarray(redone), node.output.data):
                return False
        return True


def constant(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return tape.record("matmul", (a, b), out, backward, lambda x, y: x @ y)


def transpose(tape: Tape, a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return tape.record("transpose", (a,), out, backward, lambda x: np.ascontiguousarray(x.T))


def add_row_bias(tape: Tape, x: Tensor, b: Tensor) -> Tensor:
    """x: (n, d) plus bias b: (d,) broadcast over rows."""
    out = x.data + b.data

    def backward(g):
        return g, g.sum(axis=0)

    return tape.record("add_row_bias", (x, b), out, backward, lambda xv, bv: xv + bv)


def scale(tape: Tape, x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def backward(g):
        return (g * x.data.dtype.type(c),)

    return tape.record("scale", (x,), out, backward, lambda xv: xv * xv.dtype.type(c))


def relu(tape: Tape, x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return tape.record("relu", (x,), out, backward, lambda xv: np.maximum(xv, 0))


def tanh(tape: Tape, x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return tape.record("tanh", (x,), out, backward, np.tanh)


def layer_norm(tape: Tape, x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization: (x - mean) / sqrt(var + eps) * gain + offset."""
    xd = x.data
    d = xd.shape[-1]
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mean) * ivar
    out = xhat * gain.data + offset.data

    def backward(g):
        dxhat = g * gain.data
        # dx = ivar/d * (d*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (ivar / d) * (d * dxhat - s1 - xhat * s2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    def replay(xv, gv, ov):
        m = xv.mean(axis=-1, keepdims=True)
        v = xv.var(axis=-1, keepdims=True)
        return (xv - m) / np.sqrt(v + xv.dtype.type(eps)) * gv + ov

    return tape.record("layer_norm", (x, gain, offset), out, backward, replay)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """(B, C, H, W) -> columns (B, OH*OW, C*kh*kw) plus the output grid shape."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # (B, C, OH, OW, kh, kw)
    b, c, oh, ow = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(tape: Tape, x: Tensor, w: Tensor, b: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid 2-D convolution. x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,)."""
    sh, sw = stride
    cout, cin, kh, kw = w.data.shape
    batch, cin_x, h, win = x.data.shape
    if cin_x != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin_x}, kernel expects {cin}")
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw)
    wmat = w.data.reshape(cout, cin * kh * kw).T  # (K, Cout), K flattened as (C, kh, kw)
    out = cols @ wmat + b.data
    out = np.ascontiguousarray(out.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch, oh * ow, cout)
        db = gmat.sum(axis=(0, 1))
        dw = (cols.reshape(-1, cin * kh * kw).T @ gmat.reshape(-1, cout)).T.reshape(w.data.shape)
        dcols = (gmat @ wmat.T).reshape(batch, oh, ow, cin, kh, kw)
        dx = np.zeros_like(x.data)
        # strided slices for a fixed kernel offset never overlap, so += is safe
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + oh * sh:sh, j:j + ow * sw:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, dw, db

    def replay(xv, wv, bv):
        c2, _, _ = _im2col(xv, kh, kw, sh, sw)
        o = c2 @ wv.reshape(cout, cin * kh * kw).T + bv
        return np.ascontiguousarray(o.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2))

    return tape.record("conv2d", (x, w, b), out, backward, replay)


def global_max_pool(tape: Tape, x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C), max over the spatial grid (first index wins ties)."""
    batch, c, h, w = x.data.shape
    flat = x.data.reshape(batch, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        return (dflat.reshape(x.data.shape),)

    def replay(xv):
        f = xv.reshape(batch, c, h * w)
        return np.take_along_axis(f, f.argmax(axis=-1)[..., None], axis=-1)[..., 0]

    return tape.record("global_max_pool", (x,), out, backward, replay)


def slice_rows(tape: Tape, x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return tape.record("slice_rows", (x,), out, backward, lambda xv: xv[start:stop].copy())


def softmax_cross_entropy(tape: Tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    z = logits.data
    targets = np.asarray(targets)
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    out = np.asarray(-logp[np.arange(n), targets].mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p / z.dtype.type(n),)

    def replay(zv):
        m = zv.max(axis=1, keepdims=True)
        s = zv - m
        lp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        return np.asarray(-lp[np.arange(n), targets].mean(), dtype=zv.dtype)

    return tape.record("softmax_cross_entropy", (logits,), out, backward, replay)


def sigmoid_bce(tape: Tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean element-wise binary cross-entropy between sigmoid(logits) and {0,1} targets."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    # log(1 + exp(-|z|)) formulation avoids overflow
    out = np.asarray((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean(), dtype=z.dtype)
    size = z.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (g * (sig - y) / z.dtype.type(size),)

    def replay(zv):
        return np.asarray((np.maximum(zv, 0) - zv * y + np.log1p(np.exp(-np.abs(zv)))).mean(), dtype=zv.dtype)

    return tape.record("sigmoid_bce", (logits,), out, backward, replay)
