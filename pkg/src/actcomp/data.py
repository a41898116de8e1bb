"""Dataset ingestion and the synthetic desk-scale image set.

Two on-disk formats:

* ``idx`` — the classic big-endian idx container (magic ``00 00 08 NN`` for
  u8 data with NN dimensions). Images are rank-4 (count, channels, h, w) or
  rank-3 (count, h, w, treated as single channel); labels are rank-1.
* ``raw`` — a little-endian fallback: images ``RIMG`` + u32 count, h, w, c +
  u8 pixels in NHWC order; labels ``RLBL`` + u32 count + u8 labels.

A split directory holds ``{train,eval}-images`` and ``{train,eval}-labels``
with extension ``.idx`` or ``.bin``.

The synthetic set is ten orientation classes of noisy colored gratings on
32x32 RGB images: trivially generatable offline, learnable by a small CNN in
a few epochs, and non-degenerate enough that compression choices matter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import CorruptFileError, atomic_write, read_exact

IDX_DTYPE_U8 = 0x08


@dataclass
class DatasetSplit:
    images: np.ndarray       # (n, c, h, w) uint8
    labels: np.ndarray       # (n,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise CorruptFileError(f"images must be rank 4, got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise CorruptFileError(f"labels shape {self.labels.shape} does not match "
                                   f"{len(self.images)} images")
        bad = (self.labels < 0) | (self.labels >= self.num_classes)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise CorruptFileError(f"label {int(self.labels[idx])} at index {idx} out of "
                                   f"range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)


# ---------------------------------------------------------------------------
# idx format


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    head = struct.pack(">BBBB", 0, 0, IDX_DTYPE_U8, array.ndim)
    dims = b"".join(struct.pack(">i", ext) for ext in array.shape)
    atomic_write(path, head + dims + array.tobytes())


def read_idx(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise CorruptFileError(f"bad idx magic in {path}: {head!r}")
        _, _, dtype, ndim = struct.unpack(">BBBB", head)
        if dtype != IDX_DTYPE_U8:
            raise CorruptFileError(f"unsupported idx dtype 0x{dtype:02x} in {path}")
        if not 1 <= ndim <= 4:
            raise CorruptFileError(f"unsupported idx rank {ndim} in {path}")
        shape = tuple(struct.unpack(">i", read_exact(fh, 4, "idx dimension"))[0]
                      for _ in range(ndim))
        if any(ext < 0 for ext in shape):
            raise CorruptFileError(f"negative idx dimension {shape} in {path}")
        count = int(np.prod(shape)) if shape else 1
        payload = read_exact(fh, count, f"idx payload of {path}")
        if fh.read(1) != b"":
            raise CorruptFileError(f"trailing bytes after idx payload in {path}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


# ---------------------------------------------------------------------------
# raw fallback format

RAW_IMAGE_MAGIC = b"RIMG"
RAW_LABEL_MAGIC = b"RLBL"


def write_raw_images(path: str | Path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)   # (n, c, h, w)
    n, c, h, w = images.shape
    head = RAW_IMAGE_MAGIC + struct.pack("<IIII", n, h, w, c)
    atomic_write(path, head + images.transpose(0, 2, 3, 1).tobytes())


def read_raw_images(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_IMAGE_MAGIC:
            raise CorruptFileError(f"bad raw-image magic in {path}: {magic!r}")
        n, h, w, c = struct.unpack("<IIII", read_exact(fh, 16, "raw image header"))
        payload = read_exact(fh, n * h * w * c, f"raw image payload of {path}")
        nhwc = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w, c)
        return np.ascontiguousarray(nhwc.transpose(0, 3, 1, 2))


def write_raw_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    atomic_write(path, RAW_LABEL_MAGIC + struct.pack("<I", len(labels)) + labels.tobytes())


def read_raw_labels(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_LABEL_MAGIC:
            raise CorruptFileError(f"bad raw-label magic in {path}: {magic!r}")
        (n,) = struct.unpack("<I", read_exact(fh, 4, "raw label header"))
        payload = read_exact(fh, n, f"raw label payload of {path}")
        return np.frombuffer(payload, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# split loading


def _split_paths(root: Path, split: str, fmt: str) -> tuple[Path, Path]:
    ext = "idx" if fmt == "idx" else "bin"
    return root / f"{split}-images.{ext}", root / f"{split}-labels.{ext}"


def load_split(root: str | Path, split: str, fmt: str, num_classes: int) -> DatasetSplit:
    root = Path(root)
    img_path, lbl_path = _split_paths(root, split, fmt)
    if fmt == "idx":
        images = read_idx(img_path)
        labels = read_idx(lbl_path)
    elif fmt == "raw":
        images = read_raw_images(img_path)
        labels = read_raw_labels(lbl_path)
    else:
        raise CorruptFileError(f"unknown dataset format {fmt!r}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    if labels.ndim != 1:
        raise CorruptFileError(f"labels in {lbl_path} must be rank 1, got {labels.shape}")
    return DatasetSplit(images=images, labels=labels.astype(np.int64),
                        num_classes=num_classes, name=split)


def load_dataset(root: str | Path, fmt: str,
                 num_classes: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Load the conventional train/eval split pair from a directory."""
    return (load_split(root, "train", fmt, num_classes),
            load_split(root, "eval", fmt, num_classes))


def save_split(root: str | Path, split: DatasetSplit, fmt: str) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    img_path, lbl_path = _split_paths(root, split.name, fmt)
    if fmt == "idx":
        write_idx(img_path, split.images)
        write_idx(lbl_path, split.labels.astype(np.uint8))
    elif fmt == "raw":
        write_raw_images(img_path, split.images)
        write_raw_labels(lbl_path, split.labels.astype(np.uint8))
    else:
        raise CorruptFileError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# synthetic data


def synthesize_images(count: int, rng: np.random.Generator, num_classes: int = 10,
                      size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings, one orientation per class, with random
    frequency, phase, per-channel amplitude, and pixel noise."""
    labels = rng.integers(0, num_classes, size=count)
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    angles = labels.astype(np.float64) * (np.pi / num_classes)
    freq = rng.uniform(1.5, 3.5, size=count)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=count)
    amp = rng.uniform(0.6, 1.0, size=(count, 3))
    noise = rng.normal(0.0, 18.0, size=(count, 3, size, size))

    proj = (np.cos(angles)[:, None, None] * xx[None] +
            np.sin(angles)[:, None, None] * yy[None])
    grating = np.sin(2.0 * np.pi * freq[:, None, None] * proj / size
                     + phase[:, None, None])
    pix = 127.5 + 85.0 * amp[:, :, None, None] * grating[:, None, :, :] + noise
    images = np.clip(pix, 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def synthesize_dataset(out_dir: str | Path, num_train: int, num_eval: int,
                       seed: int, fmt: str = "idx", num_classes: int = 10,
                       size: int = 32) -> dict:
    """Generate and write a train/eval pair; fully determined by the seed."""
    rng = np.random.default_rng(seed)
    train_images, train_labels = synthesize_images(num_train, rng, num_classes, size)
    eval_images, eval_labels = synthesize_images(num_eval, rng, num_classes, size)
    train = DatasetSplit(train_images, train_labels, num_classes, name="train")
    evals = DatasetSplit(eval_images, eval_labels, num_classes, name="eval")
    save_split(out_dir, train, fmt)
    save_split(out_dir, evals, fmt)
    return {"out_dir": str(out_dir), "format": fmt, "num_train": num_train,
            "num_eval": num_eval, "num_classes": num_classes, "image_size": size}
