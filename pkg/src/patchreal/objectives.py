"""Training-objective arithmetic: adversarial, cycle, combined, and full.

These are pure loss values for an external trainer; no networks or
parameter updates live here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import Image

PROB_CLAMP = 1e-7
MASK_REFRESH_START = 40
MASK_REFRESH_PERIOD = 20


@dataclass(frozen=True)
class DiscriminatorOutputs:
    """Discriminator probabilities on a batch of real and fake samples."""

    on_real: np.ndarray
    on_fake: np.ndarray

    def __post_init__(self) -> None:
        for name, arr in (("on_real", self.on_real), ("on_fake", self.on_fake)):
            a = np.asarray(arr, dtype=np.float64)
            if a.size == 0:
                raise ValueError(f"{name} batch is empty")
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class LossWeights:
    """Weight of the multi-scale contextual term in the full objective."""

    lambda_cx: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda_cx < 0:
            raise ValueError(f"lambda_cx must be >= 0, got {self.lambda_cx}")


def gan_loss(d: DiscriminatorOutputs) -> float:
    """mean log D(real) + mean log(1 - D(fake)), clamped away from log(0)."""
    real = np.clip(d.on_real, PROB_CLAMP, 1.0 - PROB_CLAMP)
    fake = np.clip(d.on_fake, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(np.log(real)) + np.mean(np.log(1.0 - fake)))


def cycle_loss(
    x: Image, recon_x: Image, y: Image, recon_y: Image, norm: str = "l1"
) -> float:
    """Reconstruction penalty in both directions, per-element mean."""
    if x.data.shape != recon_x.data.shape or y.data.shape != recon_y.data.shape:
        raise ValueError("original and reconstruction shapes differ")
    dx = x.data - recon_x.data
    dy = y.data - recon_y.data
    if norm == "l1":
        return float(np.mean(np.abs(dx)) + np.mean(np.abs(dy)))
    if norm == "l2":
        return float(np.mean(dx * dx) + np.mean(dy * dy))
    raise ValueError(f"unknown cycle norm {norm!r}")


def cca_loss(gan_xy: float, gan_yx: float, cyc: float) -> float:
    """Sum of the two adversarial terms and the cycle term."""
    return gan_xy + gan_yx + cyc


def full_loss(cca: float, cxms: float, w: LossWeights = LossWeights()) -> float:
    """cca plus the weighted contextual term; equals cca at weight 0."""
    if w.lambda_cx == 0.0:
        return cca
    return cca + w.lambda_cx * cxms


def mask_refresh_due(epoch: int) -> bool:
    """True on the epochs where semantic masks are recomputed."""
    return epoch >= MASK_REFRESH_START and (epoch - MASK_REFRESH_START) % MASK_REFRESH_PERIOD == 0
