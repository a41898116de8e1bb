"""Uniform quantization with straight-through gradients and the learnable
mixed-precision module that mixes several quantizer branches per channel group.

A branch is one uniform quantizer at a fixed bit-width. During training the
module outputs the softmax-weighted sum of all branch outputs; at inference
only the branch with the largest mixing weight runs. Branch quantizers share
one clamp range per module, tracked by an exponential moving average of the
observed batch min/max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def quantize_array(x: np.ndarray, lo: float, hi: float, bit_width: int) -> np.ndarray:
    """Snap values to the nearest of the 2^bit_width uniform levels on [lo, hi].

    The affine index is rounded half-away-from-zero (ties go to the upper
    level), then corrected against the exact float32 grid so the result is
    bit-exact nearest-level lookup on every platform.
    """
    if bit_width < 1:
        raise ValueError(f"bit_width must be >= 1, got {bit_width}")
    if not lo < hi:
        raise ValueError(f"invalid quantizer range: lo={lo} >= hi={hi}")
    lo32 = np.float32(lo)
    hi32 = np.float32(hi)
    nlevels = (1 << bit_width) - 1
    step64 = (float(hi32) - float(lo32)) / nlevels
    step32 = np.float32(step64)

    xc = np.clip(np.asarray(x, dtype=np.float32), lo32, hi32)
    t = (xc.astype(np.float64) - float(lo32)) / step64
    k = np.clip(np.floor(t + 0.5), 0, nlevels)

    def level(kk):
        return np.minimum(lo32 + kk.astype(np.float32) * step32, hi32)

    # float32 grid spacing is not exactly uniform; check both neighbours and
    # keep the genuinely nearest level, ties toward the larger index
    out = level(k)
    for cand in (np.maximum(k - 1, 0), np.minimum(k + 1, nlevels)):
        lv = level(cand)
        d_new = np.abs(xc.astype(np.float64) - lv.astype(np.float64))
        d_old = np.abs(xc.astype(np.float64) - out.astype(np.float64))
        take = (d_new < d_old) | ((d_new == d_old) & (cand > k))
        out = np.where(take, lv, out)
        k = np.where(take, cand, k)
    return out.astype(np.float32)


@dataclass
class UniformQuantizer:
    """Fixed-grid uniform quantizer with a clamp range."""

    bit_width: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.bit_width < 1:
            raise ValueError(f"bit_width must be >= 1, got {self.bit_width}")
        if not self.lo < self.hi:
            raise ValueError(f"invalid quantizer range: lo={self.lo} >= hi={self.hi}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return quantize_array(x, self.lo, self.hi, self.bit_width)


def quantize(x: Tensor, q: UniformQuantizer) -> Tensor:
    """Quantize a tensor; backward is the straight-through estimator
    (identity inside [lo, hi], zero outside)."""
    y = q.apply(x.data)
    inside = (x.data >= np.float32(q.lo)) & (x.data <= np.float32(q.hi))

    def bw(out):
        def run():
            T.accumulate(x, out.grad * inside)
        return run

    return T.make_op(y, (x,), bw)


class EmaMinMax:
    """Exponential moving average of per-tensor min/max, for calibration."""

    def __init__(self, decay: float = 0.99):
        self.decay = float(decay)
        self.lo: float | None = None
        self.hi: float | None = None

    def update(self, x: np.ndarray) -> None:
        blo = float(x.min())
        bhi = float(x.max())
        if self.lo is None:
            self.lo, self.hi = blo, bhi
        else:
            d = self.decay
            self.lo = d * self.lo + (1 - d) * blo
            self.hi = d * self.hi + (1 - d) * bhi

    def range(self) -> tuple[float, float]:
        """Current clamp range, widened if degenerate so lo < hi always holds."""
        if self.lo is None:
            return (-1.0, 1.0)
        lo, hi = self.lo, self.hi
        if not lo < hi:
            pad = max(abs(lo) * 1e-3, 1e-6)
            lo, hi = lo - pad, hi + pad
        return (lo, hi)


class MixedPrecisionModule:
    """Learnable branch mixer for one (layer, group) activation slice.

    Holds the candidate bit-widths (strictly ascending), the trainable
    architecture parameters whose softmax gives the mixing weights, and the
    shared calibration range.
    """

    def __init__(self, layer_id: int, group_id: int, bits=(6, 7, 8),
                 ema_decay: float = 0.99):
        bits = [int(b) for b in bits]
        if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
            raise ValueError(f"branch bit-widths must be strictly ascending, got {bits}")
        if any(b < 1 for b in bits):
            raise ValueError(f"branch bit-widths must be >= 1, got {bits}")
        self.layer_id = layer_id
        self.group_id = group_id
        self.bits = bits
        self.arch_params = Tensor(np.zeros(len(bits)), requires_grad=True)
        self.calib = EmaMinMax(ema_decay)

    @property
    def branch_count(self) -> int:
        return len(self.bits)

    def mixing_weights(self) -> np.ndarray:
        e = np.exp(self.arch_params.data - self.arch_params.data.max())
        return e / e.sum()

    def argmax_branch(self) -> int:
        """Index of the dominant branch; ties resolve to the lowest bit-width."""
        w = self.mixing_weights()
        return int(np.flatnonzero(w == w.max())[0])

    def branch_quantizers(self) -> list[UniformQuantizer]:
        lo, hi = self.calib.range()
        return [UniformQuantizer(b, lo, hi) for b in self.bits]

    def expected_bits_value(self) -> float:
        return float(np.dot(self.mixing_weights(), np.asarray(self.bits, dtype=np.float64)))

    def expected_bits(self) -> Tensor:
        """Sum_i weight_i * bits_i as a differentiable scalar."""
        w = T.softmax(self.arch_params, axis=0)
        return T.tsum(T.mul(w, Tensor(np.asarray(self.bits, dtype=np.float32))))


def mix_forward(x: Tensor, module: MixedPrecisionModule, mode: str,
                update_calib: bool = False) -> Tensor:
    """Run one group slice through the branch mixer.

    mode "soft": weighted sum of every branch output (training); gradients
    reach the architecture parameters through the softmax and the input
    through the straight-through estimator. mode "hard": single dominant
    branch (inference).
    """
    if x.size == 0:
        raise ValueError(f"mix_forward: empty group slice for layer "
                         f"{module.layer_id} group {module.group_id}")
    if update_calib:
        module.calib.update(x.data)
    quants = module.branch_quantizers()
    if mode == "hard":
        return quantize(x, quants[module.argmax_branch()])
    if mode != "soft":
        raise ValueError(f"mix_forward: unknown mode {mode!r}")
    weights = T.softmax(module.arch_params, axis=0)
    out = None
    for i, q in enumerate(quants):
        term = T.mul(T.narrow(weights, 0, i, 1), quantize(x, q))
        out = term if out is None else T.add(out, term)
    return out
