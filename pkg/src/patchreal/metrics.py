"""Frechet distance between fitted Gaussians, plus mean-entropy analysis.

Feature vectors arrive from files; no feature extractor runs here. The
binary feature format is little-endian: magic ``A2RF``, u32 sample
count, u32 dim, then the f32 matrix. CSV with one row per sample is also
accepted.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"A2RF"
SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class FeatureSet:
    """n x d float feature matrix with at least two samples."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] < 2:
            raise ValueError("need at least 2 samples to fit a covariance")
        if not np.isfinite(m).all():
            raise ValueError("feature matrix contains non-finite entries")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def save_features(features: np.ndarray, path: str | Path) -> None:
    m = np.asarray(features, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError("features must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.astype("<f4").tobytes())


def load_features(path: str | Path) -> FeatureSet:
    """Read a feature file, binary by magic, CSV otherwise."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == FEATURE_MAGIC:
        if len(data) < 12:
            raise FormatError(f"{path}: truncated feature header")
        n, d = struct.unpack("<II", data[4:12])
        expected = 12 + 4 * n * d
        if len(data) != expected:
            raise FormatError(
                f"{path}: payload is {len(data) - 12} bytes, expected {4 * n * d}"
            )
        matrix = np.frombuffer(data[12:], dtype="<f4").reshape(n, d)
        return FeatureSet(matrix)
    try:
        matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: not a feature binary and CSV parse failed ({exc})")
    return FeatureSet(matrix)


def gaussian_fit(f: FeatureSet) -> GaussianStats:
    """Sample mean and (n-1)-normalized, symmetrized covariance."""
    mean = f.matrix.mean(axis=0)
    centered = f.matrix - mean
    cov = centered.T @ centered / (f.n - 1)
    return GaussianStats(mean=mean, cov=(cov + cov.T) / 2.0)


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below zero (floating-point noise) clamp to zero; inputs
    asymmetric beyond tolerance are rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"need a square matrix, got shape {m.shape}")
    if np.abs(m - m.T).max() > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0


def fid(g1: GaussianStats, g2: GaussianStats) -> float:
    """Squared Frechet distance between two Gaussians, clamped at zero.

    The cross trace uses sqrt(C1^1/2 C2 C1^1/2), which is symmetric by
    construction and equals trace((C1 C2)^1/2).
    """
    if g1.mean.shape != g2.mean.shape or g1.cov.shape != g2.cov.shape:
        raise ValueError("dimension mismatch between Gaussians")
    diff = g1.mean - g2.mean
    c1_half = matrix_sqrt_psd(g1.cov)
    inner = c1_half @ g2.cov @ c1_half
    inner = (inner + inner.T) / 2.0
    eigvals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    cross = float(np.sqrt(eigvals).sum())
    value = float(diff @ diff) + float(np.trace(g1.cov) + np.trace(g2.cov)) - 2.0 * cross
    return max(value, 0.0)


def mean_entropy(rows: np.ndarray) -> float:
    """Mean natural-log entropy of probability rows; 0 ln 0 counts as 0.

    Rows must be nonnegative and sum to 1 within 1e-4; each row is
    renormalized before the entropy is taken.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.size == 0:
        raise ValueError("no probability rows")
    if rows.min() < 0.0:
        raise ValueError("negative probability entries")
    sums = rows.sum(axis=1)
    if (sums == 0.0).any():
        raise ValueError("zero-sum probability row")
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("probability rows must sum to 1 within 1e-4")
    p = rows / sums[:, None]
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1)))
