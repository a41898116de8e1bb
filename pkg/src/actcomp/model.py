"""The desk-scale CNN and the activation compression plumbing between its layers.

The network is four conv+batchnorm blocks (16/32/32/64 channels) and two
linear layers, sized for 32x32 inputs. Each batchnorm output is a
compression point: during compression runs the activation is projected onto
its PCA basis, split into importance-ordered channel groups, each group
quantized by its learnable mixed-precision module (the last group zeroed),
reassembled, and mapped back before the nonlinearity.

Weights can be quantized to 8 bits on the fly (per-tensor min/max grid with
straight-through gradients), which keeps the stored master weights float
while the forward pass always sees 8-bit values.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear
from .quantize import MixedPrecisionModule, UniformQuantizer, mix_forward, quantize
from .tensor import Tensor
from .transform import PcaTransform, apply_transform, invert_transform

WEIGHT_BITS = 8


def quantize_weight(w: Tensor) -> Tensor:
    """8-bit per-tensor weight quantization on the current min/max range."""
    lo = float(w.data.min())
    hi = float(w.data.max())
    if not lo < hi:
        return w
    return quantize(w, UniformQuantizer(WEIGHT_BITS, lo, hi))


class CompressionPoint:
    """Per-layer compression state: transform, group boundaries, branch mixers.

    The mixers persist across partition refits so learned branch preferences
    and calibration carry over; only the channel ranges they see change.
    """

    def __init__(self, layer_id: int, channels: int, height: int, width: int,
                 num_groups: int, init_bits, ema_decay: float):
        self.layer_id = layer_id
        self.channels = channels
        self.height = height
        self.width = width
        self.num_groups = num_groups
        self.transform: PcaTransform | None = None
        self.group_sizes: list[int] | None = None
        self.modules = [MixedPrecisionModule(layer_id, g, bits=init_bits,
                                             ema_decay=ema_decay)
                        for g in range(num_groups - 1)]

    def set_partition(self, transform: PcaTransform, group_sizes: list[int]) -> None:
        if transform.channels != self.channels:
            raise ValueError(f"layer {self.layer_id}: transform has "
                             f"{transform.channels} channels, expected {self.channels}")
        if sum(group_sizes) != self.channels or len(group_sizes) != self.num_groups:
            raise ValueError(f"layer {self.layer_id}: bad group sizes {group_sizes} "
                             f"for {self.channels} channels / {self.num_groups} groups")
        self.transform = transform
        self.group_sizes = list(group_sizes)

    def active(self) -> bool:
        return self.transform is not None

    def process(self, x: Tensor, mode: str, update_calib: bool) -> Tensor:
        if not self.active():
            return x
        y = apply_transform(x, self.transform)
        parts: list[Tensor] = []
        start = 0
        for g, size in enumerate(self.group_sizes):
            if size == 0:
                continue
            piece = T.narrow(y, 1, start, size)
            start += size
            if g == self.num_groups - 1:
                parts.append(T.scale(piece, 0.0))        # pruned group
            else:
                parts.append(mix_forward(piece, self.modules[g], mode,
                                         update_calib=update_calib))
        mixed = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return invert_transform(mixed, self.transform)


class ActivationCompressor:
    """Owns every compression point; the model calls back into it per layer."""

    def __init__(self, points: list[CompressionPoint], mode: str = "soft"):
        self.points = points
        self.mode = mode
        self.update_calib = False
        self.capture: dict[int, list[np.ndarray]] | None = None

    def process(self, layer_id: int, x: Tensor) -> Tensor:
        if self.capture is not None:
            self.capture.setdefault(layer_id, []).append(x.data.copy())
        return self.points[layer_id].process(x, self.mode, self.update_calib)

    def iter_group_terms(self):
        """(module, channels, h, w) for every active non-pruned group."""
        for pt in self.points:
            if not pt.active():
                continue
            for g, size in enumerate(pt.group_sizes[:-1]):
                yield pt.modules[g], size, pt.height, pt.width

    def total_values(self) -> int:
        return sum(pt.channels * pt.height * pt.width for pt in self.points)


class FrozenCompressor:
    """Inference-time compressor driven by fixed per-group quantizers."""

    def __init__(self, layers: list[tuple[PcaTransform, list[int],
                                          list[UniformQuantizer | None]]]):
        self.layers = layers
        self.mode = "hard"

    def process(self, layer_id: int, x: Tensor) -> Tensor:
        transform, group_sizes, quants = self.layers[layer_id]
        if x.shape[1] != transform.channels:
            raise ValueError(f"layer {layer_id}: activation has {x.shape[1]} channels, "
                             f"policy expects {transform.channels}")
        y = apply_transform(x, transform)
        parts: list[Tensor] = []
        start = 0
        for g, size in enumerate(group_sizes):
            if size == 0:
                continue
            piece = T.narrow(y, 1, start, size)
            start += size
            if g == len(group_sizes) - 1:
                parts.append(T.scale(piece, 0.0))
            else:
                parts.append(quantize(piece, quants[g]))
        mixed = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return invert_transform(mixed, transform)


class DeskCnn:
    """4 conv blocks + 2 linear layers for 10-class 32x32 images."""

    CHANNELS = (16, 32, 32, 64)
    POOL = (True, True, False, True)

    def __init__(self, in_channels: int = 3, num_classes: int = 10, image_size: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.image_size = image_size
        self.convs: list[Conv2d] = []
        self.bns: list[BatchNorm2d] = []
        prev = in_channels
        for ch in self.CHANNELS:
            self.convs.append(Conv2d(prev, ch, kernel=3, padding=1, rng=rng))
            self.bns.append(BatchNorm2d(ch))
            prev = ch
        spatial = image_size
        for pool in self.POOL:
            if pool:
                spatial //= 2
        feat = self.CHANNELS[-1] * spatial * spatial
        self.fc1 = Linear(feat, 128, rng=rng)
        self.fc2 = Linear(128, num_classes, rng=rng)
        self.quantize_weights = False

    def compression_dims(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every compression point (batchnorm output)."""
        dims = []
        spatial = self.image_size
        for ch, pool in zip(self.CHANNELS, self.POOL):
            dims.append((ch, spatial, spatial))
            if pool:
                spatial //= 2
        return dims

    def forward(self, x: Tensor, training: bool,
                compressor: ActivationCompressor | FrozenCompressor | None = None) -> Tensor:
        h = x
        for i, (conv, bn, pool) in enumerate(zip(self.convs, self.bns, self.POOL)):
            w = quantize_weight(conv.weight) if self.quantize_weights else None
            h = conv(h, weight_override=w)
            h = bn(h, training)
            if compressor is not None:
                h = compressor.process(i, h)
            h = T.relu(h)
            if pool:
                h = T.maxpool2d(h, 2)
        h = T.flatten(h)
        w = quantize_weight(self.fc1.weight) if self.quantize_weights else None
        h = T.relu(self.fc1(h, weight_override=w))
        w = quantize_weight(self.fc2.weight) if self.quantize_weights else None
        return self.fc2(h, weight_override=w)

    def params(self) -> list[Tensor]:
        out: list[Tensor] = []
        for conv, bn in zip(self.convs, self.bns):
            out += conv.params() + bn.params()
        return out + self.fc1.params() + self.fc2.params()

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            state[f"conv{i}.weight"] = conv.weight.data
            state[f"conv{i}.bias"] = conv.bias.data
            state[f"bn{i}.gamma"] = bn.gamma.data
            state[f"bn{i}.beta"] = bn.beta.data
            state[f"bn{i}.running_mean"] = bn.running["mean"]
            state[f"bn{i}.running_var"] = bn.running["var"]
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            state[f"{name}.weight"] = layer.weight.data
            state[f"{name}.bias"] = layer.bias.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            conv.weight.data = np.ascontiguousarray(state[f"conv{i}.weight"],
                                                    dtype=np.float32)
            conv.bias.data = np.ascontiguousarray(state[f"conv{i}.bias"], dtype=np.float32)
            bn.gamma.data = np.ascontiguousarray(state[f"bn{i}.gamma"], dtype=np.float32)
            bn.beta.data = np.ascontiguousarray(state[f"bn{i}.beta"], dtype=np.float32)
            bn.running["mean"] = np.ascontiguousarray(state[f"bn{i}.running_mean"],
                                                      dtype=np.float32)
            bn.running["var"] = np.ascontiguousarray(state[f"bn{i}.running_var"],
                                                     dtype=np.float32)
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            layer.weight.data = np.ascontiguousarray(state[f"{name}.weight"],
                                                     dtype=np.float32)
            layer.bias.data = np.ascontiguousarray(state[f"{name}.bias"], dtype=np.float32)

    def clone(self) -> "DeskCnn":
        other = DeskCnn(self.in_channels, self.num_classes, self.image_size)
        other.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        return other
