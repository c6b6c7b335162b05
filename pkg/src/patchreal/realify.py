"""Gradient descent directly on pixels against the contextual loss.

Stands in for a trained generator at desk scale: Adam steps on the
image, a small L2 anchor to the starting image to keep content in
place, and early stopping when the best loss stops improving.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ann
from .cxloss import BankMap, CxConfig, IndexMap, build_indexes, cx_loss_gradient
from .imaging import Image, LabelMaskSet, ScaleSpec, extract_patches


@dataclass(frozen=True)
class OptimizeConfig:
    steps: int = 500
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    content_weight: float = 0.01
    patience: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.content_weight < 0:
            raise ValueError("content_weight must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class OptimizeTrace:
    """Per-step losses and the best image seen along the way."""

    total: list[float] = field(default_factory=list)
    cx: list[float] = field(default_factory=list)
    anchor: list[float] = field(default_factory=list)
    best_step: int = 0
    best_image: Image | None = None

    @property
    def best_total(self) -> float:
        return self.total[self.best_step]

    def __len__(self) -> int:
        return len(self.total)


def realify(
    start: Image,
    banks: BankMap,
    masks: LabelMaskSet,
    cfg: OptimizeConfig = OptimizeConfig(),
    cx_cfg: CxConfig = CxConfig(),
    indexes: IndexMap | None = None,
) -> tuple[Image, OptimizeTrace]:
    """Minimize contextual loss plus the content anchor over the pixels.

    Pixels clamp to [0, 1] after every step. Returns the best-seen image,
    which re-evaluates to the best trace loss.
    """
    if indexes is None:
        needed = {
            key: bank
            for key, bank in banks.items()
            if key[1] in cx_cfg.scales
        }
        indexes = build_indexes(needed, seed=cfg.seed)

    img = start.data.copy()
    origin = start.data
    numel = img.size
    m = np.zeros_like(img)
    v = np.zeros_like(img)
    trace = OptimizeTrace()
    best = np.inf
    best_img = img.copy()
    since_best = 0

    for step in range(cfg.steps):
        grad_cx, report = cx_loss_gradient(
            Image(img), banks, masks, cx_cfg, indexes=indexes
        )
        cx_val = report.total
        diff = img - origin
        anchor = float(np.mean(diff * diff))
        total = cx_val + cfg.content_weight * anchor
        if not np.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {step}: cx={cx_val} anchor={anchor}"
            )
        trace.total.append(total)
        trace.cx.append(cx_val)
        trace.anchor.append(anchor)
        if total < best:
            best = total
            best_img = img.copy()
            trace.best_step = step
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

        grad = grad_cx + cfg.content_weight * (2.0 / numel) * diff
        t = step + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        img = img - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        np.clip(img, 0.0, 1.0, out=img)

    trace.best_image = Image(best_img)
    return trace.best_image, trace


def nn_drift(
    image: Image,
    banks: BankMap,
    masks: LabelMaskSet,
    scales: Sequence[ScaleSpec],
    coverage_threshold: float = 0.20,
    threads: int = 1,
) -> dict[ScaleSpec, float]:
    """Mean exact nearest-neighbor distance per scale, a descent diagnostic.

    A patch in several classes scores the closest match over its class
    banks. Uses a full scan, so values are exact.
    """
    out: dict[ScaleSpec, float] = {}
    for scale in scales:
        ps = extract_patches(image, masks, scale, coverage_threshold)
        nearest = np.full(len(ps), np.inf)
        for class_id, idx in ps.class_indices().items():
            bank = banks.get((class_id, scale))
            if bank is None:
                raise ValueError(f"no bank for class {class_id} at scale {scale}")
            centered = ps.vectors[idx] - bank.mean.astype(np.float64)
            hits = ann.exact_search(bank, centered, k=1, threads=threads)
            dists = np.array([ns.distances[0] for ns in hits])
            nearest[idx] = np.minimum(nearest[idx], dists)
        out[scale] = float(nearest.mean())
    return out
