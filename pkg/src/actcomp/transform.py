"""PCA channel decorrelation for activation tensors.

Activations (n, d, h, w) are reshaped to a d x (n*h*w) observation matrix,
centered per channel, and eigendecomposed. The resulting orthogonal basis
maps activations into a space where channels are ordered by explained
variance (most important first), which downstream grouping and pruning rely
on. The transform is applied as an explicit linear map with an exact
gradient; no folding into neighbouring layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps the upper triangle, zeroing one off-diagonal entry per rotation,
    until the largest off-diagonal magnitude falls below ``tol`` or the sweep
    budget runs out. Returns (eigenvalues, eigenvectors-as-columns), unsorted.
    Adequate and fully deterministic for the few-hundred-channel matrices
    this package sees.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"jacobi_eigh: square matrix required, got {a.shape}")
    m = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.abs(m - np.diag(np.diag(m)))
        if off.max(initial=0.0) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(m[p, q]) < tol:
                    continue
                phi = 0.5 * np.arctan2(2.0 * m[p, q], m[q, q] - m[p, p])
                c, s = np.cos(phi), np.sin(phi)
                rot_p = c * m[:, p] - s * m[:, q]
                rot_q = s * m[:, p] + c * m[:, q]
                m[:, p], m[:, q] = rot_p, rot_q
                rot_p = c * m[p, :] - s * m[q, :]
                rot_q = s * m[p, :] + c * m[q, :]
                m[p, :], m[q, :] = rot_p, rot_q
                m[p, q] = m[q, p] = 0.0
                vp = c * v[:, p] - s * v[:, q]
                vq = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = vp, vq
    return np.diag(m).copy(), v


@dataclass
class PcaTransform:
    """Per-layer decorrelation cache: orthogonal basis (columns are principal
    directions, importance-descending), eigenvalue spectrum, channel mean."""

    layer_id: int
    basis: np.ndarray            # (d, d) float32
    eigenvalues: np.ndarray      # (d,) float32, descending, >= 0
    channel_mean: np.ndarray     # (d,) float32
    sample_count: int = 0

    def __post_init__(self):
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float32)
        self.eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float32)
        self.channel_mean = np.ascontiguousarray(self.channel_mean, dtype=np.float32)

    @property
    def channels(self) -> int:
        return self.basis.shape[0]

    def sigmas(self) -> np.ndarray:
        """Square roots of the eigenvalues, float64, descending."""
        return np.sqrt(self.eigenvalues.astype(np.float64))


def fit_pca(samples: np.ndarray, layer_id: int = 0) -> PcaTransform:
    """Fit the per-layer basis from sampled activations of shape (n, d, h, w).

    Observations are the n*h*w spatial positions; requires at least d of
    them. Eigenvalues are clipped at zero and sorted descending; each
    eigenvector's largest-magnitude entry is made positive so refits are
    comparable across epochs.
    """
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ValueError(f"fit_pca: rank-4 samples required, got {samples.shape}")
    n, d, h, w = samples.shape
    m = n * h * w
    if m < d:
        raise ValueError(f"fit_pca: {m} observations for {d} channels "
                         f"(short by {d - m}); provide more sample images")
    obs = samples.transpose(1, 0, 2, 3).reshape(d, m).astype(np.float64)
    mean = obs.mean(axis=1)
    centered = obs - mean[:, None]
    cov = (centered @ centered.T) / m
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    for j in range(d):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, j] = -col
    return PcaTransform(layer_id=layer_id, basis=vecs, eigenvalues=vals,
                        channel_mean=mean, sample_count=m)


def _check_channels(x: Tensor, pc: PcaTransform, op: str) -> None:
    if x.ndim != 4 or x.shape[1] != pc.channels:
        raise ValueError(f"{op}: input shape {x.shape} does not match "
                         f"{pc.channels}-channel transform of layer {pc.layer_id}")


def _to_obs(data: np.ndarray) -> np.ndarray:
    n, d, h, w = data.shape
    return data.transpose(1, 0, 2, 3).reshape(d, n * h * w)


def _from_obs(mat: np.ndarray, shape: tuple) -> np.ndarray:
    n, d, h, w = shape
    return np.ascontiguousarray(mat.reshape(d, n, h, w).transpose(1, 0, 2, 3))


def apply_transform(x: Tensor, pc: PcaTransform) -> Tensor:
    """Project activations onto the principal directions (channels become
    importance-descending). Linear, with exact gradient."""
    _check_channels(x, pc, "apply_transform")
    u = pc.basis
    y = _from_obs(u.T @ (_to_obs(x.data) - pc.channel_mean[:, None]), x.shape)

    def bw(out):
        def run():
            T.accumulate(x, _from_obs(u @ _to_obs(out.grad), x.shape))
        return run

    return T.make_op(y.astype(np.float32, copy=False), (x,), bw)


def invert_transform(y: Tensor, pc: PcaTransform) -> Tensor:
    """Map transformed activations back to the original channel space."""
    _check_channels(y, pc, "invert_transform")
    u = pc.basis
    x = _from_obs(u @ _to_obs(y.data) + pc.channel_mean[:, None], y.shape)

    def bw(out):
        def run():
            T.accumulate(y, _from_obs(u.T @ _to_obs(out.grad), y.shape))
        return run

    return T.make_op(x.astype(np.float32, copy=False), (y,), bw)
