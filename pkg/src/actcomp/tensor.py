"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

The graph is dynamic: every op call records its parents and a backward
closure on the output tensor. ``Tensor.backward()`` walks the graph once in
reverse topological order, accumulates gradients additively across fan-out,
and then frees the graph so intermediates can be collected.

Everything is 32-bit float. Broadcasting is limited to per-channel
parameters (bias in ``linear``/``conv2d``, affine in batchnorm) and to
multiplication by a one-element tensor; anything else needs an explicit
reshape.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (e.g. teacher forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(np.asarray(data))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar loss; frees the graph afterwards."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            node._parents = ()
            node._backward = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(np.float32, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        np.add(t.grad, g.reshape(t.grad.shape), out=t.grad)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward(out)
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# hooks for custom differentiable ops defined in sibling modules
def make_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
    return _node(data, parents, backward)


def accumulate(t: "Tensor", g: np.ndarray) -> None:
    _accumulate(t, g)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def bw(out):
        def run():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)
        return run

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bw(out):
        def run():
            _accumulate(a, out.grad)
            _accumulate(b, -out.grad)
        return run

    return _node(a.data - b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, -out.grad)
        return run

    return _node(-a.data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a one-element tensor."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(out):
        def run():
            ga = out.grad * bd
            gb = out.grad * ad
            _accumulate(a, ga if a.size != 1 else np.sum(ga).reshape(a.shape))
            _accumulate(b, gb if b.size != 1 else np.sum(gb).reshape(b.shape))
        return run

    return _node(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(out):
        def run():
            _accumulate(a, out.grad * np.float32(c))
        return run

    return _node(a.data * np.float32(c), (a,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, np.full_like(a.data, out.grad.reshape(())))
        return run

    return _node(np.sum(a.data, dtype=np.float32).reshape(()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(out):
        def run():
            _accumulate(a, out.grad.reshape(a.shape))
        return run

    return _node(a.data.reshape(shape), (a,), bw)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(out):
        def run():
            _accumulate(a, out.grad.transpose(inv))
        return run

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat: empty input list")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(int(s), int(e))
                _accumulate(p, out.grad[tuple(idx)])
        return run

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if length <= 0 or start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: invalid slice [{start}, {start + length}) on axis "
                         f"{axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[idx] = out.grad
                _accumulate(a, g)
        return run

    return _node(np.ascontiguousarray(a.data[idx]), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(out):
        def run():
            _accumulate(a, out.grad * mask)
        return run

    return _node(np.maximum(a.data, 0), (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            _accumulate(a, out.grad / a.data)
        return run

    return _node(np.log(a.data), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} of shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(out):
        def run():
            dot = np.sum(out.grad * y, axis=axis, keepdims=True)
            _accumulate(a, y * (out.grad - dot))
        return run

    return _node(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(out):
        def run():
            _accumulate(a, out.grad @ bd.T)
            _accumulate(b, ad.T @ out.grad)
        return run

    return _node(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T + bias, with x (n, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: shape mismatch input {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} vs out dim {weight.shape[0]}")
        y = y + bias.data
    xd, wd = x.data, weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run():
            _accumulate(x, out.grad @ wd)
            _accumulate(weight, out.grad.T @ xd)
            if bias is not None:
                _accumulate(bias, out.grad.sum(axis=0))
        return run

    return _node(y, parents, bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n, c*kh*kw, oh*ow) patch matrix."""
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]            # (n, c, oh, ow, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    wmat = w.reshape(o, -1)
    out = np.matmul(wmat, cols)                          # (n, o, oh*ow)
    return out.reshape(n, o, oh, ow), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: rank-4 input and weight required, got {x.shape} "
                         f"and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: channel mismatch between input {x.shape} and "
                         f"weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    y, cols = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias shape {bias.shape} vs out channels {o}")
        y = y + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    wd = weight.data

    def bw(out):
        def run():
            go = out.grad
            n_, o_, oh, ow = go.shape
            go2 = go.reshape(n_, o_, oh * ow)
            if weight.requires_grad:
                gm = go2.transpose(1, 0, 2).reshape(o_, -1)
                cm = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
                _accumulate(weight, (gm @ cm.T).reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, go.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accumulate(x, _conv_input_grad(go, wd, x.shape, stride, padding))
        return run

    return _node(y, parents, bw)


def _conv_input_grad(go: np.ndarray, w: np.ndarray, x_shape: tuple,
                     stride: int, padding: int) -> np.ndarray:
    """Gradient w.r.t. conv input: dilate, full-correlate with the flipped kernel, crop."""
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    _, _, oh, ow = go.shape
    if stride > 1:
        gd = np.zeros((n, o, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=np.float32)
        gd[:, :, ::stride, ::stride] = go
    else:
        gd = go
    # remainder rows/cols the forward never read (non-divisible stride fit)
    rh = (h + 2 * padding - kh) - (oh - 1) * stride
    rw = (wd + 2 * padding - kw) - (ow - 1) * stride
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1 + rh), (kw - 1, kw - 1 + rw)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full, _ = _conv_forward(gp, wf, stride=1, padding=0)
    return np.ascontiguousarray(full[:, :, padding:padding + h, padding:padding + wd])


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); ties take the first element."""
    stride = kernel if stride is None else stride
    if stride != kernel:
        raise ValueError(f"maxpool2d: only stride == kernel supported, got "
                         f"kernel={kernel} stride={stride}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"maxpool2d: spatial dims {(h, w)} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    xr = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, ho, wo, kernel * kernel)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bw(out):
        def run():
            g = np.zeros((n, c, ho, wo, kernel * kernel), dtype=np.float32)
            np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
            g = g.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
            _accumulate(x, g.reshape(n, c, h, w))
        return run

    return _node(np.ascontiguousarray(y), (x,), bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: dict,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization on NCHW input.

    ``running`` holds float32 arrays under keys "mean" and "var"; training mode
    uses batch statistics and updates them in place, eval mode reads them.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: rank-4 input required, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: parameter shapes {gamma.shape}/{beta.shape} vs "
                         f"{c} channels")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float32)
        var = xd.var(axis=(0, 2, 3), dtype=np.float32)
        unbiased = var * np.float32(m / max(m - 1, 1))
        running["mean"][:] = (1 - momentum) * running["mean"] + momentum * mu
        running["var"][:] = (1 - momentum) * running["var"] + momentum * unbiased
    else:
        mu = running["mean"]
        var = running["var"]
    ivar = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    xmu = xd - mu[None, :, None, None]
    xhat = xmu * ivar[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data

    def bw(out):
        def run():
            go = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, np.sum(go * xhat, axis=(0, 2, 3)))
            if beta.requires_grad:
                _accumulate(beta, np.sum(go, axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = go * gd[None, :, None, None]
                if training:
                    iv = ivar[None, :, None, None]
                    dvar = np.sum(dxhat * xmu, axis=(0, 2, 3)) * (-0.5) * ivar ** 3
                    dmu = (np.sum(-dxhat * iv, axis=(0, 2, 3))
                           + dvar * np.sum(-2.0 * xmu, axis=(0, 2, 3)) / m)
                    dx = (dxhat * iv
                          + (dvar[None, :, None, None] * 2.0 * xmu) / m
                          + dmu[None, :, None, None] / m)
                else:
                    dx = dxhat * ivar[None, :, None, None]
                _accumulate(x, dx.astype(np.float32, copy=False))
        return run

    return _node(y.astype(np.float32, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Stochastic gradient descent with classical momentum.

    Update rule per parameter: v <- momentum * v + grad; p <- p - lr * v.
    A parameter with no accumulated gradient contributes grad = 0.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            g = p.grad if p.grad is not None else 0.0
            if self.momentum != 0.0:
                v *= np.float32(self.momentum)
                v += g
            else:
                v[:] = g
            p.data -= np.float32(self.lr) * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
