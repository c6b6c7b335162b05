"""Semantically-aware multi-scale contextual loss over sparse candidates.

For each scale, every patch of the input image is matched against the
memory bank of each class it belongs to. Per row of candidates:

    d      centered cosine distance, exact, float64
    dt     d / (min(d) + 1e-5)            row-normalized distance
    A      softmax((1 - dt) / h)           affinity, row-stochastic

A class contributes -log(mean of row maxima of A); classes sum into the
per-scale loss and scales sum into the total. The gradient with respect
to the image pixels follows the same chain analytically: through the row
max (argmax entry only), the softmax Jacobian, the normalization
including its min denominator (argmin entry; candidate sets held fixed),
the cosine, and a scatter-add over the overlapping patch windows in grid
order, which keeps accumulation deterministic for any thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ann
from ._util import chunk_ranges, ordered_map
from .bank import MemoryBank
from .imaging import (
    DEFAULT_COVERAGE_THRESHOLD,
    DEFAULT_SCALES,
    Image,
    LabelMaskSet,
    ScaleSpec,
    extract_patches,
)

NORMALIZATION_EPS = 1e-5
DEFAULT_BANDWIDTH = 0.5
DEFAULT_K = ann.DEFAULT_K

BankMap = Mapping[tuple[int, ScaleSpec], MemoryBank]
IndexMap = Mapping[tuple[int, ScaleSpec], ann.AnnIndex]


@dataclass(frozen=True)
class CxConfig:
    """Knobs for the multi-scale loss and its candidate retrieval."""

    scales: tuple[ScaleSpec, ...] = DEFAULT_SCALES
    h: float = DEFAULT_BANDWIDTH
    k: int = DEFAULT_K
    nprobe: int | None = None  # None: per-index default
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD
    index_seed: int = 0
    exact: bool = False  # dense rows over the whole bank, no ANN
    stop_grad_min: bool = False  # freeze the normalization denominator
    threads: int = 1

    def __post_init__(self) -> None:
        if self.h <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.h}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.scales:
            raise ValueError("at least one scale required")


@dataclass
class AffinityRows:
    """Retrieved candidates and affinities for one (scale, class)."""

    class_id: int
    h: float
    patch_indices: np.ndarray
    ids: list[np.ndarray]
    distances: list[np.ndarray]
    normalized: list[np.ndarray]
    affinities: list[np.ndarray]
    argmax_ids: np.ndarray


@dataclass
class CxLossReport:
    """Loss breakdown: per (scale, class), per scale, and the total."""

    per_class: dict[tuple[ScaleSpec, int], tuple[float, int]]
    per_scale: dict[ScaleSpec, float]
    total: float
    gradient: np.ndarray | None = None
    rows: dict[tuple[ScaleSpec, int], AffinityRows] | None = None


def cosine_distance(q: np.ndarray, b: np.ndarray) -> float:
    """Centered cosine distance in [0, 2]; zero-norm inputs score 1."""
    q = np.asarray(q, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if q.shape != b.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {b.shape}")
    qn = np.linalg.norm(q)
    bn = np.linalg.norm(b)
    if qn == 0.0 or bn == 0.0:
        return 1.0
    return float(1.0 - (q @ b) / (qn * bn))


def normalize_distances(row: np.ndarray) -> np.ndarray:
    """Divide a row of distances by its minimum plus a small epsilon."""
    row = np.asarray(row, dtype=np.float64)
    if row.size == 0:
        raise ValueError("empty distance row")
    if row.min() < 0:
        raise ValueError("distances must be nonnegative")
    return row / (row.min() + NORMALIZATION_EPS)


def affinities(row: np.ndarray, h: float = DEFAULT_BANDWIDTH) -> np.ndarray:
    """Row-wise softmax of (1 - normalized distance) / h, max-stabilized."""
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    z = (1.0 - np.asarray(row, dtype=np.float64)) / h
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def class_cx_loss(affinity_rows: Sequence[np.ndarray]) -> float:
    """-log of the mean row maximum; 0 exactly when every max is 1."""
    if len(affinity_rows) == 0:
        raise ValueError("need at least one affinity row")
    total = math.fsum(float(np.max(r)) for r in affinity_rows)
    return -math.log(total / len(affinity_rows)) + 0.0  # kill negative zero


def image_cx_loss(rows_by_class: Mapping[int, Sequence[np.ndarray]]) -> float:
    """Sum of per-class losses over the classes present in the image."""
    return math.fsum(class_cx_loss(rows) for _, rows in sorted(rows_by_class.items()))


def build_indexes(
    banks: BankMap,
    seed: int = 0,
    n_list: int | None = None,
) -> dict[tuple[int, ScaleSpec], ann.AnnIndex]:
    """Train one inverted-file index per bank, reproducibly."""
    return {
        key: ann.train_index(bank, n_list=n_list, seed=seed)
        for key, bank in sorted(banks.items(), key=lambda kv: (kv[0][0], str(kv[0][1])))
    }


def multiscale_cx_loss(
    image: Image,
    banks: BankMap,
    masks: LabelMaskSet,
    cfg: CxConfig = CxConfig(),
    indexes: IndexMap | None = None,
    keep_rows: bool = False,
) -> CxLossReport:
    """Evaluate the total contextual loss of ``image`` against ``banks``."""
    return _evaluate(image, banks, masks, cfg, indexes, want_grad=False, keep_rows=keep_rows)


def cx_loss_gradient(
    image: Image,
    banks: BankMap,
    masks: LabelMaskSet,
    cfg: CxConfig = CxConfig(),
    indexes: IndexMap | None = None,
    keep_rows: bool = False,
) -> tuple[np.ndarray, CxLossReport]:
    """Loss plus its analytic pixel gradient, shaped like the image."""
    report = _evaluate(image, banks, masks, cfg, indexes, want_grad=True, keep_rows=keep_rows)
    return report.gradient, report


def _dense_rows(bank: MemoryBank, centered_queries: np.ndarray) -> list[ann.NeighborSet]:
    """Full rows over every bank vector, in bank id order."""
    centered = bank.centered64()
    norms = bank.norms64()
    qn = np.linalg.norm(centered_queries, axis=1)
    sims = centered_queries @ centered.T
    denom = qn[:, None] * norms[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0, sims / denom, 0.0)
    dists = 1.0 - sims
    ids = np.arange(bank.count, dtype=np.int64)
    return [ann.NeighborSet(ids=ids, distances=dists[i]) for i in range(dists.shape[0])]


def _row_gradient(
    q: np.ndarray,
    d: np.ndarray,
    aff: np.ndarray,
    ids: np.ndarray,
    inv_sum: float,
    bank: MemoryBank,
    h: float,
    stop_grad_min: bool,
) -> np.ndarray | None:
    """d(loss)/d(raw patch vector) for one candidate row; None when zero."""
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        return None
    a = int(np.argmax(aff))
    mn = int(np.argmin(d))
    m = float(d[mn])
    # -1/S through the log, then the softmax Jacobian row at the argmax.
    g_z = (-inv_sum) * aff[a] * (np.where(np.arange(d.size) == a, 1.0, 0.0) - aff)
    g_dt = -g_z / h
    denom = m + NORMALIZATION_EPS
    g_d = g_dt / denom
    if not stop_grad_min:
        g_d[mn] -= float(g_dt @ d) / (denom * denom)
    cn = bank.norms64()[ids]
    valid = cn > 0
    if not valid.any():
        return None
    chat = bank.centered64()[ids[valid]] / cn[valid, None]
    qhat = q / qn
    coss = chat @ qhat
    gv = g_d[valid]
    return -(gv @ chat - float(gv @ coss) * qhat) / qn


def _evaluate(
    image: Image,
    banks: BankMap,
    masks: LabelMaskSet,
    cfg: CxConfig,
    indexes: IndexMap | None,
    want_grad: bool,
    keep_rows: bool,
) -> CxLossReport:
    per_class: dict[tuple[ScaleSpec, int], tuple[float, int]] = {}
    per_scale: dict[ScaleSpec, float] = {}
    rows_out: dict[tuple[ScaleSpec, int], AffinityRows] = {}
    grad = np.zeros_like(image.data) if want_grad else None
    trained: dict[tuple[int, ScaleSpec], ann.AnnIndex] = {}

    for scale in cfg.scales:
        ps = extract_patches(image, masks, scale, cfg.coverage_threshold)
        p = scale.patch_size
        scale_loss = 0.0
        for class_id, idx in ps.class_indices().items():
            key = (class_id, scale)
            bank = banks.get(key)
            if bank is None:
                raise ValueError(f"no bank for class {class_id} at scale {scale}")
            queries = ps.vectors[idx]
            centered_q = queries - bank.mean.astype(np.float64)
            if cfg.exact:
                neighbors = _dense_rows(bank, centered_q)
            else:
                index = indexes.get(key) if indexes is not None else None
                if index is None:
                    index = trained.get(key)
                    if index is None:
                        index = ann.train_index(bank, seed=cfg.index_seed)
                        trained[key] = index
                neighbors = ann.search(
                    index, bank, centered_q, cfg.k, cfg.nprobe, threads=cfg.threads
                )

            n = len(neighbors)
            aff_rows: list[np.ndarray] = []
            norm_rows: list[np.ndarray] = []
            maxima = np.empty(n, dtype=np.float64)
            for i, ns in enumerate(neighbors):
                dt = normalize_distances(ns.distances)
                a = affinities(dt, cfg.h)
                aff_rows.append(a)
                norm_rows.append(dt)
                maxima[i] = a.max()
            total_max = math.fsum(maxima)
            loss = -math.log(total_max / n) + 0.0  # kill negative zero
            per_class[(scale, class_id)] = (loss, n)
            scale_loss += loss

            if want_grad:
                inv_sum = 1.0 / total_max

                def run(span: tuple[int, int]) -> list[np.ndarray | None]:
                    return [
                        _row_gradient(
                            centered_q[i],
                            neighbors[i].distances,
                            aff_rows[i],
                            neighbors[i].ids,
                            inv_sum,
                            bank,
                            cfg.h,
                            cfg.stop_grad_min,
                        )
                        for i in range(*span)
                    ]

                chunks = chunk_ranges(n)
                grads = [g for blk in ordered_map(run, chunks, cfg.threads) for g in blk]
                for i, g_q in enumerate(grads):
                    if g_q is None:
                        continue
                    ox, oy = ps.origins[idx[i]]
                    grad[oy : oy + p, ox : ox + p, :] += g_q.reshape(p, p, 3)

            if keep_rows:
                rows_out[(scale, class_id)] = AffinityRows(
                    class_id=class_id,
                    h=cfg.h,
                    patch_indices=idx.copy(),
                    ids=[ns.ids for ns in neighbors],
                    distances=[ns.distances for ns in neighbors],
                    normalized=norm_rows,
                    affinities=aff_rows,
                    argmax_ids=np.array(
                        [ns.ids[int(np.argmax(a))] for ns, a in zip(neighbors, aff_rows)],
                        dtype=np.int64,
                    ),
                )
        per_scale[scale] = scale_loss

    return CxLossReport(
        per_class=per_class,
        per_scale=per_scale,
        total=math.fsum(per_scale.values()),
        gradient=grad,
        rows=rows_out if keep_rows else None,
    )
