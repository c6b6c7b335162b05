"""Per-(class, scale) memory banks of real patches, with on-disk format.

A bank stores every patch of one semantic class at one scale, as float32
vectors in the original pixel space, together with the centering mean
used by the cosine distance. Large banks can carry a PCA model (used
only to build the candidate-search space) and scalar quantization of the
stored vectors.

File layout (little-endian), CRC32 of all preceding bytes at the end:

    magic   4s   b"A2RB"
    version u32  1
    class   u32
    psize   u16
    stride  u16
    dim     u32
    count   u64
    flags   u32  bit0 quantized, bit1 pca, bit2 trailing index block
    mean    dim * f32
    [pca]   in u32, out u32, mean in*f32, components out*in*f32
    [quant] lo dim*f32, hi dim*f32
    payload count*dim * (u8 | f32)
    [index] written by ann.append_index_block
    crc     u32
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError
from .imaging import Image, LabelMaskSet, ScaleSpec, extract_patches

MAGIC = b"A2RB"
VERSION = 1
FLAG_QUANTIZED = 1 << 0
FLAG_PCA = 1 << 1
FLAG_INDEX = 1 << 2
_KNOWN_FLAGS = FLAG_QUANTIZED | FLAG_PCA | FLAG_INDEX

DEFAULT_PCA_THRESHOLD = 1_000_000
DEFAULT_PCA_DIM = 64


@dataclass(eq=False)
class QuantParams:
    """Per-dimension linear 8-bit quantization bounds."""

    lo: np.ndarray  # float32 (dim,)
    hi: np.ndarray  # float32 (dim,)

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "QuantParams":
        return cls(
            lo=vectors.min(axis=0).astype(np.float32),
            hi=vectors.max(axis=0).astype(np.float32),
        )

    def span(self) -> np.ndarray:
        return (self.hi.astype(np.float64) - self.lo.astype(np.float64))

    def quantize(self, vectors: np.ndarray) -> np.ndarray:
        span = self.span()
        safe = np.where(span > 0, span, 1.0)
        scaled = (vectors.astype(np.float64) - self.lo.astype(np.float64)) / safe
        codes = np.round(np.clip(scaled, 0.0, 1.0) * 255.0)
        return codes.astype(np.uint8)

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        values = self.lo.astype(np.float64) + (codes.astype(np.float64) / 255.0) * self.span()
        return values.astype(np.float32)


@dataclass(eq=False)
class PcaModel:
    """Orthonormal-row projection used for the candidate-search space."""

    mean: np.ndarray  # float32 (input_dim,)
    components: np.ndarray  # float32 (output_dim, input_dim)

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]

    def project(self, raw: np.ndarray) -> np.ndarray:
        """Project raw original-space vectors into the search space (f64)."""
        centered = raw.astype(np.float64) - self.mean.astype(np.float64)
        return centered @ self.components.astype(np.float64).T


def fit_pca(vectors: np.ndarray, output_dim: int, mean: np.ndarray) -> PcaModel:
    """Fit the top ``output_dim`` principal directions of ``vectors``.

    Component signs are fixed so the largest-magnitude entry of each row
    is positive, which makes refits bit-reproducible.
    """
    if output_dim < 1:
        raise ValueError(f"output_dim must be >= 1, got {output_dim}")
    if output_dim > vectors.shape[1]:
        raise ValueError(
            f"output_dim {output_dim} exceeds input dim {vectors.shape[1]}"
        )
    centered = vectors.astype(np.float64) - mean.astype(np.float64)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    rows = vt[:output_dim]
    if rows.shape[0] < output_dim:  # fewer samples than requested components
        pad = np.zeros((output_dim - rows.shape[0], vectors.shape[1]))
        rows = np.vstack([rows, pad])
    flips = np.sign(rows[np.arange(rows.shape[0]), np.abs(rows).argmax(axis=1)])
    flips[flips == 0] = 1.0
    return PcaModel(
        mean=np.asarray(mean, dtype=np.float32).copy(),
        components=(rows * flips[:, None]).astype(np.float32),
    )


@dataclass(eq=False)
class MemoryBank:
    """Immutable set of original-space patch vectors for one (class, scale).

    ``vectors`` are float32; when the bank is quantized they are the
    dequantized values, so persistence is idempotent. ``mean`` is the
    arithmetic mean of the pre-quantization vectors, cast to float32.
    """

    class_id: int
    scale: ScaleSpec
    vectors: np.ndarray
    mean: np.ndarray
    quant: QuantParams | None = None
    pca: PcaModel | None = None
    _centered: np.ndarray | None = field(default=None, repr=False)
    _norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def ref(self) -> str:
        """Identifier binding an index to this bank."""
        return (
            f"c{self.class_id}_p{self.scale.patch_size}_s{self.scale.stride}"
            f"_d{self.dim}_n{self.count}"
        )

    @classmethod
    def from_vectors(
        cls,
        class_id: int,
        scale: ScaleSpec,
        vectors: np.ndarray,
        *,
        quant: QuantParams | None = None,
        pca: PcaModel | None = None,
    ) -> "MemoryBank":
        arr = np.asarray(vectors)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("bank needs a 2-D nonempty vector array")
        mean = arr.astype(np.float64).mean(axis=0).astype(np.float32)
        return cls(
            class_id=class_id,
            scale=scale,
            vectors=arr.astype(np.float32),
            mean=mean,
            quant=quant,
            pca=pca,
        )

    def centered64(self) -> np.ndarray:
        """Bank vectors minus the centering mean, float64, cached."""
        if self._centered is None:
            self._centered = self.vectors.astype(np.float64) - self.mean.astype(
                np.float64
            )
        return self._centered

    def norms64(self) -> np.ndarray:
        if self._norms is None:
            self._norms = np.linalg.norm(self.centered64(), axis=1)
        return self._norms


def build_banks(
    corpus: Sequence[tuple[Image, LabelMaskSet]],
    scale: ScaleSpec,
    *,
    pca_threshold: int = DEFAULT_PCA_THRESHOLD,
    quantize: bool = False,
    pca_dim: int | None = None,
    coverage_threshold: float = 0.20,
) -> dict[int, MemoryBank]:
    """Build one memory bank per semantic class observed in ``corpus``.

    The centering mean is computed before any compression. PCA and
    quantization kick in for banks holding at least ``pca_threshold``
    vectors, or for every bank when ``quantize`` is set.
    """
    if not corpus:
        raise ValueError("empty corpus")
    grouped: dict[int, list[np.ndarray]] = {}
    for img, masks in corpus:
        ps = extract_patches(img, masks, scale, coverage_threshold)
        for class_id, idx in ps.class_indices().items():
            grouped.setdefault(class_id, []).append(ps.vectors[idx])

    banks: dict[int, MemoryBank] = {}
    for class_id in sorted(grouped):
        stacked = np.concatenate(grouped[class_id], axis=0)
        mean = stacked.mean(axis=0).astype(np.float32)
        vectors = stacked.astype(np.float32)
        quant = None
        pca = None
        if quantize or vectors.shape[0] >= pca_threshold:
            out_dim = pca_dim if pca_dim is not None else min(DEFAULT_PCA_DIM, vectors.shape[1])
            pca = fit_pca(vectors, out_dim, mean)
            quant = QuantParams.fit(vectors)
            vectors = quant.dequantize(quant.quantize(vectors))
        banks[class_id] = MemoryBank(
            class_id=class_id,
            scale=scale,
            vectors=vectors,
            mean=mean,
            quant=quant,
            pca=pca,
        )
    return banks


class _Reader:
    """Byte cursor that raises FormatError on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated bank file while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32_array(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _bank_body(bank: MemoryBank, with_index: bool) -> bytearray:
    flags = 0
    if bank.quant is not None:
        flags |= FLAG_QUANTIZED
    if bank.pca is not None:
        flags |= FLAG_PCA
    if with_index:
        flags |= FLAG_INDEX
    body = bytearray()
    body += MAGIC
    body += struct.pack(
        "<IIHHIQI",
        VERSION,
        bank.class_id,
        bank.scale.patch_size,
        bank.scale.stride,
        bank.dim,
        bank.count,
        flags,
    )
    body += bank.mean.astype("<f4").tobytes()
    if bank.pca is not None:
        body += struct.pack("<II", bank.pca.input_dim, bank.pca.output_dim)
        body += bank.pca.mean.astype("<f4").tobytes()
        body += bank.pca.components.astype("<f4").tobytes()
    if bank.quant is not None:
        body += bank.quant.lo.astype("<f4").tobytes()
        body += bank.quant.hi.astype("<f4").tobytes()
    if bank.quant is not None:
        body += bank.quant.quantize(bank.vectors).tobytes()
    else:
        body += bank.vectors.astype("<f4").tobytes()
    return body


def save_bank(bank: MemoryBank, path: str | Path, index=None) -> None:
    """Persist a bank (and optionally its search index) with a CRC trailer."""
    body = _bank_body(bank, with_index=index is not None)
    if index is not None:
        from .ann import append_index_block

        append_index_block(body, index)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_bank(path: str | Path) -> MemoryBank:
    bank, _ = load_bank_with_index(path)
    return bank


def load_bank_with_index(path: str | Path):
    """Load a bank file; returns (bank, index or None)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated bank file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(data[:-4])
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    class_id = r.u32("class id")
    patch_size = r.u16("patch size")
    stride = r.u16("stride")
    dim = r.u32("dim")
    count = r.u64("count")
    flags = r.u32("flags")
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(f"{path}: unsupported flags {flags:#x}")
    mean = r.f32_array(dim, "mean")
    pca = None
    if flags & FLAG_PCA:
        in_dim = r.u32("pca input dim")
        out_dim = r.u32("pca output dim")
        if in_dim != dim:
            raise FormatError(f"{path}: pca input dim {in_dim} != bank dim {dim}")
        pca_mean = r.f32_array(in_dim, "pca mean")
        comps = r.f32_array(out_dim * in_dim, "pca components").reshape(out_dim, in_dim)
        pca = PcaModel(mean=pca_mean, components=comps)
    quant = None
    if flags & FLAG_QUANTIZED:
        lo = r.f32_array(dim, "quant lo")
        hi = r.f32_array(dim, "quant hi")
        quant = QuantParams(lo=lo, hi=hi)
    if quant is not None:
        raw = r.take(count * dim, "payload")
        codes = np.frombuffer(raw, dtype=np.uint8).reshape(count, dim)
        vectors = quant.dequantize(codes)
    else:
        vectors = r.f32_array(count * dim, "payload").reshape(count, dim)
    bank = MemoryBank(
        class_id=class_id,
        scale=ScaleSpec(patch_size, stride),
        vectors=vectors,
        mean=mean,
        quant=quant,
        pca=pca,
    )
    index = None
    if flags & FLAG_INDEX:
        from .ann import read_index_block

        index = read_index_block(r, bank)
    if not r.done():
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return bank, index


def bank_filename(class_id: int, scale: ScaleSpec) -> str:
    return f"c{class_id}_s{scale.patch_size}.a2rb"


def save_bank_dir(
    banks_by_scale: Mapping[ScaleSpec, Mapping[int, MemoryBank]],
    directory: str | Path,
    indexes: Mapping[tuple[int, ScaleSpec], object] | None = None,
) -> list[Path]:
    """Write one file per (class, scale) into ``directory``.

    Scales must have distinct patch sizes because filenames carry only the
    size; the stride is recovered from the header.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sizes = [s.patch_size for s in banks_by_scale]
    if len(set(sizes)) != len(sizes):
        raise ValueError("scales written to one directory need distinct patch sizes")
    written = []
    for scale, banks in banks_by_scale.items():
        for class_id, bank in banks.items():
            path = directory / bank_filename(class_id, scale)
            index = None
            if indexes is not None:
                index = indexes.get((class_id, scale))
            save_bank(bank, path, index=index)
            written.append(path)
    return sorted(written)


def load_bank_dir(
    directory: str | Path,
) -> tuple[dict[tuple[int, ScaleSpec], MemoryBank], dict[tuple[int, ScaleSpec], object]]:
    """Load every ``*.a2rb`` file under ``directory``, keyed by (class, scale)."""
    directory = Path(directory)
    banks: dict[tuple[int, ScaleSpec], MemoryBank] = {}
    indexes: dict[tuple[int, ScaleSpec], object] = {}
    for path in sorted(directory.glob("*.a2rb")):
        bank, index = load_bank_with_index(path)
        key = (bank.class_id, bank.scale)
        if key in banks:
            raise FormatError(f"{path}: duplicate bank for class {key[0]} scale {key[1]}")
        banks[key] = bank
        if index is not None:
            indexes[key] = index
    return banks, indexes
