"""Inverted-file k-NN over a memory bank with exact re-ranking.

The coarse quantizer is plain Lloyd k-means (25 iterations, seeded
k-means++ init) over the bank's search space: centered vectors, PCA
projected when the bank carries a model, then length normalized so
Euclidean cluster geometry matches the cosine distance used for
re-ranking. Candidates gathered from the probed lists are re-ranked by
the exact centered-cosine distance on the original-space vectors, so
reported distances are exact regardless of how many lists were probed.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._util import chunk_ranges, ordered_map
from .bank import MemoryBank, _Reader
from .errors import FormatError

KMEANS_ITERS = 25
DEFAULT_K = 5


@dataclass(eq=False)
class AnnIndex:
    """Coarse centroids plus per-centroid id lists for one bank."""

    centroids: np.ndarray  # float32 (n_list, search_dim)
    lists: tuple[np.ndarray, ...]  # int64 ids, ascending within each list
    nprobe_default: int
    bank_ref: str

    @property
    def n_list(self) -> int:
        return self.centroids.shape[0]


@dataclass(eq=False)
class NeighborSet:
    """k nearest bank ids for one query, ascending by exact distance."""

    ids: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def default_n_list(count: int) -> int:
    return max(1, math.isqrt(count) + (0 if math.isqrt(count) ** 2 == count else 1))


def default_nprobe(n_list: int) -> int:
    return max(1, n_list // 16)


def search_space(bank: MemoryBank, centered: np.ndarray) -> np.ndarray:
    """Map centered original-space vectors into the normalized search space."""
    z = np.asarray(centered, dtype=np.float64)
    if bank.pca is not None:
        comp = bank.pca.components.astype(np.float64)
        # Centered inputs fold the bank mean back in before the model mean
        # comes off; the two coincide for banks built here.
        delta = bank.mean.astype(np.float64) - bank.pca.mean.astype(np.float64)
        z = (z + delta) @ comp.T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def _kmeans(points: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    """Seeded k-means++ init followed by fixed Lloyd iterations."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = points.shape[0]
    chosen = np.empty((n_clusters, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    chosen[0] = points[first]
    d2 = np.einsum("ij,ij->i", points - chosen[0], points - chosen[0])
    for j in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen[j] = points[idx]
        diff = points - chosen[j]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    centroids = chosen
    for _ in range(KMEANS_ITERS):
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        for j in range(n_clusters):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            # empty cluster keeps its previous centroid
    return centroids


def train_index(
    bank: MemoryBank,
    n_list: int | None = None,
    seed: int = 0,
) -> AnnIndex:
    """Cluster the bank's search space into ``n_list`` inverted lists."""
    if bank.count == 0:
        raise ValueError("cannot index an empty bank")
    if n_list is None:
        n_list = default_n_list(bank.count)
    if n_list < 1 or n_list > bank.count:
        raise ValueError(f"n_list {n_list} out of range for bank of {bank.count}")
    points = search_space(bank, bank.centered64())
    centroids = _kmeans(points, n_list, seed).astype(np.float32)
    assign = np.argmin(_sq_dists(points, centroids.astype(np.float64)), axis=1)
    lists = tuple(
        np.flatnonzero(assign == j).astype(np.int64) for j in range(n_list)
    )
    return AnnIndex(
        centroids=centroids,
        lists=lists,
        nprobe_default=default_nprobe(n_list),
        bank_ref=bank.ref,
    )


def _rank_candidates(
    q: np.ndarray,
    qn: float,
    cand: np.ndarray,
    centered: np.ndarray,
    norms: np.ndarray,
    k: int,
) -> NeighborSet:
    if qn == 0.0:
        d = np.ones(cand.shape[0], dtype=np.float64)
    else:
        block = centered[cand]
        bn = norms[cand]
        sims = np.divide(
            block @ q, qn * bn, out=np.zeros(cand.shape[0]), where=bn > 0
        )
        d = 1.0 - sims
    order = np.lexsort((cand, d))[:k]
    return NeighborSet(ids=cand[order], distances=d[order])


def search(
    index: AnnIndex,
    bank: MemoryBank,
    queries: np.ndarray,
    k: int,
    nprobe: int | None = None,
    threads: int = 1,
) -> list[NeighborSet]:
    """Probe the nearest lists per centered query and re-rank exactly.

    Queries are centered vectors (raw patch minus the bank mean), one row
    each. Probing expands past ``nprobe`` lists when needed so a query
    always gets k results unless the bank itself holds fewer. With
    ``nprobe == n_list`` the result equals a brute-force scan; ties break
    toward the lower id.
    """
    if index.bank_ref != bank.ref:
        raise ValueError(f"index built for {index.bank_ref}, bank is {bank.ref}")
    if k < 1:
        raise ValueError("k must be >= 1")
    q2d = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q2d.shape[1] != bank.dim:
        raise ValueError(f"query dim {q2d.shape[1]} != bank dim {bank.dim}")
    if nprobe is None:
        nprobe = index.nprobe_default
    nprobe = min(max(1, nprobe), index.n_list)

    sq = search_space(bank, q2d)
    probe_order = np.argsort(
        _sq_dists(sq, index.centroids.astype(np.float64)), axis=1, kind="stable"
    )
    centered = bank.centered64()
    norms = bank.norms64()
    qnorms = np.linalg.norm(q2d, axis=1)

    def run(span: tuple[int, int]) -> list[NeighborSet]:
        out = []
        for i in range(*span):
            picked: list[np.ndarray] = []
            total = 0
            for rank, cluster in enumerate(probe_order[i]):
                if rank >= nprobe and total >= k:
                    break
                ids = index.lists[cluster]
                if ids.size:
                    picked.append(ids)
                    total += ids.size
            cand = (
                np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
            )
            out.append(
                _rank_candidates(q2d[i], float(qnorms[i]), cand, centered, norms, k)
            )
        return out

    chunks = chunk_ranges(q2d.shape[0])
    results = ordered_map(run, chunks, threads)
    return [ns for block in results for ns in block]


def exact_search(
    bank: MemoryBank, queries: np.ndarray, k: int, threads: int = 1
) -> list[NeighborSet]:
    """Scan every bank vector; the oracle mode behind the CLI ``--exact``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q2d = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q2d.shape[1] != bank.dim:
        raise ValueError(f"query dim {q2d.shape[1]} != bank dim {bank.dim}")
    centered = bank.centered64()
    norms = bank.norms64()
    all_ids = np.arange(bank.count, dtype=np.int64)
    qnorms = np.linalg.norm(q2d, axis=1)

    def run(span: tuple[int, int]) -> list[NeighborSet]:
        return [
            _rank_candidates(q2d[i], float(qnorms[i]), all_ids, centered, norms, k)
            for i in range(*span)
        ]

    chunks = chunk_ranges(q2d.shape[0])
    results = ordered_map(run, chunks, threads)
    return [ns for block in results for ns in block]


def append_index_block(body: bytearray, index: AnnIndex) -> None:
    """Serialize an index into a bank file body (see bank module layout)."""
    body += struct.pack("<III", index.n_list, index.nprobe_default, index.centroids.shape[1])
    body += index.centroids.astype("<f4").tobytes()
    for ids in index.lists:
        body += struct.pack("<Q", ids.size)
        body += ids.astype("<u8").tobytes()
    ref = index.bank_ref.encode("utf-8")
    body += struct.pack("<H", len(ref))
    body += ref


def read_index_block(r: _Reader, bank: MemoryBank) -> AnnIndex:
    n_list = r.u32("index n_list")
    nprobe_default = r.u32("index nprobe")
    sdim = r.u32("index search dim")
    centroids = r.f32_array(n_list * sdim, "index centroids").reshape(n_list, sdim)
    lists = []
    for _ in range(n_list):
        size = r.u64("index list length")
        raw = r.take(8 * size, "index list ids")
        lists.append(np.frombuffer(raw, dtype="<u8").astype(np.int64))
    ref_len = r.u16("index ref length")
    ref = r.take(ref_len, "index ref").decode("utf-8")
    index = AnnIndex(
        centroids=centroids,
        lists=tuple(lists),
        nprobe_default=nprobe_default,
        bank_ref=ref,
    )
    if ref != bank.ref:
        raise FormatError(f"index ref {ref} does not match bank {bank.ref}")
    total = sum(ids.size for ids in lists)
    if total != bank.count:
        raise FormatError(f"index covers {total} of {bank.count} vectors")
    return index
