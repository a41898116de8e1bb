"""Training objective: memory-overhead penalty plus knowledge distillation.

The memory term is the expected activation bit count under the current
mixing weights, scaled by penalty strength p and a normalization constant so
the value reads as p * (average bits per value). The distillation term is
the KL divergence from the original model's output distribution to the
compressed model's, so fine-tuning needs no labels. The total objective is
their plain sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .quantize import MixedPrecisionModule
from .tensor import Tensor


@dataclass
class LossConfig:
    penalty: float                # p, strength of the memory term
    normalizer: float = 1.0       # divides the raw bit count (e.g. total value count)

    def __post_init__(self):
        if self.penalty <= 0:
            raise ValueError(f"penalty must be positive, got {self.penalty}")
        if self.normalizer <= 0:
            raise ValueError(f"normalizer must be positive, got {self.normalizer}")


def memory_loss(terms: list[tuple[MixedPrecisionModule, int, int, int]],
                cfg: LossConfig) -> Tensor:
    """Expected bit count over all non-pruned (layer, group) slices.

    ``terms`` lists (module, channels_in_group, height, width); pruned groups
    are excluded by the caller since they cost zero bits. Differentiable
    w.r.t. every module's architecture parameters.
    """
    total: Tensor | None = None
    for module, channels, height, width in terms:
        if channels == 0:
            continue
        contrib = T.scale(module.expected_bits(), float(channels * height * width))
        total = contrib if total is None else T.add(total, contrib)
    if total is None:
        return Tensor(np.zeros(()))
    return T.scale(total, cfg.penalty / cfg.normalizer)


def expected_average_bits(terms: list[tuple[MixedPrecisionModule, int, int, int]],
                          total_values: int) -> float:
    """Soft-policy average bits per value (pruned channels count at 0 bits)."""
    raw = sum(m.expected_bits_value() * c * h * w for m, c, h, w in terms if c)
    return raw / float(total_values)


def kd_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Batch-mean KL divergence D(teacher || student) over output distributions.

    The teacher side is treated as a constant; gradients flow into the
    student logits only.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"kd_loss: logit shapes differ, student "
                         f"{student_logits.shape} vs teacher {teacher_logits.shape}")
    n = student_logits.shape[0]
    tl = teacher_logits.data.astype(np.float64)
    tl = tl - tl.max(axis=1, keepdims=True)
    p = np.exp(tl)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    teacher_entropy_sum = float(plogp.sum())

    log_student = T.log(T.softmax(student_logits, axis=1))
    cross = T.tsum(T.mul(log_student, Tensor(p.astype(np.float32))))
    entropy = Tensor(np.asarray(teacher_entropy_sum, dtype=np.float32).reshape(()))
    return T.scale(T.add(entropy, T.neg(cross)), 1.0 / n)


def total_loss(memory: Tensor, distill: Tensor) -> Tensor:
    """Plain sum of the two objective terms."""
    if memory.size != 1 or distill.size != 1:
        raise ValueError(f"total_loss: scalar terms required, got shapes "
                         f"{memory.shape} and {distill.shape}")
    return T.add(T.reshape(memory, ()), T.reshape(distill, ()))
