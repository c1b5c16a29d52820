"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records enough of the forward computation to
backpropagate a scalar loss to every leaf with ``requires_grad=True``. Plain
ndarrays (or Tensors with ``requires_grad=False``) act as constants: nothing
flows through them, which is how assignment matrices stay out of the gradient.

Supported operations are exactly the ones the autoencoder-classifier needs:
elementwise arithmetic, matmul (including batched), reshape, reductions,
relu/sigmoid/log-softmax, and strided conv / transposed conv. Every backward
rule is validated against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        grad = _unbroadcast(grad, self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad=None):
        """Backpropagate from this tensor; `grad` defaults to 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(-g)

        return Tensor._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        return Tensor._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        a, b = self.data, other.data
        out_data = a @ b

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ b.swapaxes(-1, -2))
            if other.requires_grad:
                other._accumulate(a.swapaxes(-1, -2) @ g)

        return Tensor._make(out_data, (self, other), backward)

    # -- shape and reductions -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape

        def backward(g):
            self._accumulate(g.reshape(orig))

        return Tensor._make(self.data.reshape(shape), (self,), backward)

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- nonlinearities --------------------------------------------------------

    def relu(self):
        mask = self.data > 0
        out_data = np.where(mask, self.data, 0)

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._make(out_data, (self,), backward)

    def sigmoid(self):
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out_data = out_data.astype(x.dtype, copy=False)

        def backward(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward)

    def log_softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def backward(g):
            softmax = np.exp(out_data)
            self._accumulate(g - softmax * g.sum(axis=axis, keepdims=True))

        return Tensor._make(out_data, (self,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution; x is (n, c_in, h, w), weight is (c_out, c_in, kh, kw)."""
    xd, wd = x.data, weight.data
    n, c_in, h, w = xd.shape
    c_out, c_in2, kh, kw = wd.shape
    if c_in != c_in2:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight {c_in2}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((n, c_out, h_out, w_out), dtype=xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride]
            out += np.tensordot(xs, wd[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += \
                        np.tensordot(g, wd[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)
        if weight.requires_grad:
            dw = np.zeros_like(wd)
            for ki in range(kh):
                for kj in range(kw):
                    xs = xp[:, :, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride]
                    dw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution; weight is (c_in, c_out, kh, kw)."""
    xd, wd = x.data, weight.data
    n, c_in, h, w = xd.shape
    c_in2, c_out, kh, kw = wd.shape
    if c_in != c_in2:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c_in}, weight {c_in2}")
    h_out = (h - 1) * stride + kh - 2 * padding
    w_out = (w - 1) * stride + kw - 2 * padding
    if h_out < 1 or w_out < 1:
        raise ValueError("conv_transpose2d output would be empty")
    op = np.zeros((n, c_out, h_out + 2 * padding, w_out + 2 * padding), dtype=xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            op[:, :, ki:ki + stride * h:stride, kj:kj + stride * w:stride] += \
                np.tensordot(xd, wd[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
    out = op[:, :, padding:padding + h_out, padding:padding + w_out] if padding else op
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        if x.requires_grad:
            dx = np.zeros_like(xd)
            for ki in range(kh):
                for kj in range(kw):
                    gs = gp[:, :, ki:ki + stride * h:stride, kj:kj + stride * w:stride]
                    dx += np.tensordot(gs, wd[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
            x._accumulate(dx)
        if weight.requires_grad:
            dw = np.zeros_like(wd)
            for ki in range(kh):
                for kj in range(kw):
                    gs = gp[:, :, ki:ki + stride * h:stride, kj:kj + stride * w:stride]
                    dw[:, :, ki, kj] = np.tensordot(xd, gs, axes=([0, 2, 3], [0, 2, 3]))
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._make(out, parents, backward)
