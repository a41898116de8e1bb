"""Layer modules over the autodiff core: parameter containers plus forward helpers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor, weight_override: Tensor | None = None) -> Tensor:
        w = weight_override if weight_override is not None else self.weight
        return T.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = {"mean": np.zeros(channels, dtype=np.float32),
                        "var": np.ones(channels, dtype=np.float32)}
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running, training,
                             momentum=self.momentum, eps=self.eps)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class Linear:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        std = float(np.sqrt(2.0 / in_features))
        self.weight = Tensor(rng.normal(0.0, std, size=(out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor, weight_override: Tensor | None = None) -> Tensor:
        w = weight_override if weight_override is not None else self.weight
        return T.linear(x, w, self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=np.float32)
    onehot[np.arange(n), labels] = 1.0
    logp = T.log(T.softmax(logits, axis=1))
    return T.scale(T.tsum(T.mul(logp, Tensor(onehot))), -1.0 / n)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))
