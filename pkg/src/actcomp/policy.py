"""Frozen compression policy: the deployable artifact a compression run produces.

Per layer it stores the PCA basis/spectrum/mean, the channel count of every
importance-ordered group, and for each surviving group the chosen bit-width
with its exact float32 calibration range. Serialized as a little-endian
"ACPL" binary, written atomically.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import CorruptFileError, atomic_write, pack_str, read_exact, unpack_str
from .quantize import UniformQuantizer
from .transform import PcaTransform

MAGIC = b"ACPL"
VERSION = 1


@dataclass
class GroupPolicy:
    bit_width: int
    lo: float
    hi: float


@dataclass
class LayerPolicy:
    layer_id: int
    height: int
    width: int
    group_sizes: list[int]            # all groups, last one pruned
    groups: list[GroupPolicy]         # one per non-pruned group
    transform: PcaTransform

    @property
    def channels(self) -> int:
        return int(sum(self.group_sizes))


@dataclass
class CompressionPolicy:
    layers: list[LayerPolicy]
    num_groups: int
    b_min: int
    avg_bits: float
    seed: int
    config_hash: str

    def average_bits(self) -> float:
        """Recompute average bits per value; pruned channels count at 0 bits
        but stay in the denominator."""
        num = 0.0
        den = 0.0
        for layer in self.layers:
            area = layer.height * layer.width
            den += layer.channels * area
            for size, grp in zip(layer.group_sizes[:-1], layer.groups):
                num += grp.bit_width * size * area
        return num / den if den else 0.0

    def validate(self) -> "CompressionPolicy":
        for layer in self.layers:
            if len(layer.groups) != self.num_groups - 1:
                raise ValueError(f"layer {layer.layer_id}: expected "
                                 f"{self.num_groups - 1} group policies, got "
                                 f"{len(layer.groups)}")
            for grp in layer.groups:
                if not self.b_min <= grp.bit_width <= 8:
                    raise ValueError(f"layer {layer.layer_id}: bit-width "
                                     f"{grp.bit_width} outside [{self.b_min}, 8]")
        if abs(self.average_bits() - self.avg_bits) > 1e-6:
            raise ValueError(f"stored avg_bits {self.avg_bits} does not match "
                             f"recomputed {self.average_bits()}")
        return self

    def frozen_layer_specs(self):
        """(transform, group_sizes, quantizers) per layer, for hard inference."""
        specs = []
        for layer in self.layers:
            quants = [UniformQuantizer(g.bit_width, g.lo, g.hi) if size > 0 else None
                      for size, g in zip(layer.group_sizes[:-1], layer.groups)]
            specs.append((layer.transform, list(layer.group_sizes), quants))
        return specs

    def summary(self) -> dict:
        return {
            "num_groups": self.num_groups,
            "b_min": self.b_min,
            "avg_bits": self.avg_bits,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "layers": [
                {
                    "layer": layer.layer_id,
                    "channels": layer.channels,
                    "height": layer.height,
                    "width": layer.width,
                    "pruned_channels": layer.group_sizes[-1],
                    "groups": [
                        {"group": g, "channels": size, "bits": grp.bit_width,
                         "lo": grp.lo, "hi": grp.hi}
                        for g, (size, grp) in enumerate(zip(layer.group_sizes[:-1],
                                                            layer.groups))
                    ],
                }
                for layer in self.layers
            ],
        }


def save_policy(path: str | Path, policy: CompressionPolicy) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", policy.seed))
    buf.write(pack_str(policy.config_hash))
    buf.write(struct.pack("<II", policy.num_groups, policy.b_min))
    buf.write(struct.pack("<d", policy.avg_bits))
    buf.write(struct.pack("<I", len(policy.layers)))
    for layer in policy.layers:
        d = layer.channels
        buf.write(struct.pack("<IIII", layer.layer_id, d, layer.height, layer.width))
        for size in layer.group_sizes:
            buf.write(struct.pack("<I", size))
        for grp in layer.groups:
            buf.write(struct.pack("<I", grp.bit_width))
            buf.write(struct.pack("<ff", grp.lo, grp.hi))
        buf.write(np.ascontiguousarray(layer.transform.basis, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(layer.transform.eigenvalues, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(layer.transform.channel_mean, dtype="<f4").tobytes())
    atomic_write(path, buf.getvalue())


def load_policy(path: str | Path) -> CompressionPolicy:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CorruptFileError(f"bad policy magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CorruptFileError(f"unsupported policy version {version}")
        (seed,) = struct.unpack("<Q", read_exact(fh, 8, "seed"))
        cfg_hash = unpack_str(fh, "config hash")
        num_groups, b_min = struct.unpack("<II", read_exact(fh, 8, "group header"))
        (avg_bits,) = struct.unpack("<d", read_exact(fh, 8, "avg bits"))
        (n_layers,) = struct.unpack("<I", read_exact(fh, 4, "layer count"))
        layers = []
        for _ in range(n_layers):
            layer_id, d, h, w = struct.unpack("<IIII",
                                              read_exact(fh, 16, "layer header"))
            sizes = [struct.unpack("<I", read_exact(fh, 4, "group size"))[0]
                     for _ in range(num_groups)]
            if sum(sizes) != d:
                raise CorruptFileError(f"layer {layer_id}: group sizes {sizes} do not "
                                       f"sum to {d} channels")
            groups = []
            for _ in range(num_groups - 1):
                (bits,) = struct.unpack("<I", read_exact(fh, 4, "bit width"))
                lo, hi = struct.unpack("<ff", read_exact(fh, 8, "calibration"))
                groups.append(GroupPolicy(bit_width=bits, lo=lo, hi=hi))
            basis = np.frombuffer(read_exact(fh, d * d * 4, "basis"),
                                  dtype="<f4").reshape(d, d).copy()
            eig = np.frombuffer(read_exact(fh, d * 4, "eigenvalues"),
                                dtype="<f4").copy()
            mean = np.frombuffer(read_exact(fh, d * 4, "channel mean"),
                                 dtype="<f4").copy()
            layers.append(LayerPolicy(
                layer_id=layer_id, height=h, width=w, group_sizes=sizes, groups=groups,
                transform=PcaTransform(layer_id=layer_id, basis=basis, eigenvalues=eig,
                                       channel_mean=mean)))
    return CompressionPolicy(layers=layers, num_groups=num_groups, b_min=b_min,
                             avg_bits=avg_bits, seed=seed,
                             config_hash=cfg_hash).validate()
