from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_photo, top_half_masks
from patchreal.bank import (
    DEFAULT_PCA_THRESHOLD,
    MemoryBank,
    QuantParams,
    build_banks,
    fit_pca,
    load_bank,
    load_bank_dir,
    save_bank,
    save_bank_dir,
)
from patchreal.errors import FormatError
from patchreal.imaging import Image, LabelMaskSet, ScaleSpec, extract_patches


def solid_gray_corpus():
    img = Image(np.full((8, 8, 3), 0.5))
    return [(img, LabelMaskSet.empty(8, 8))]


class TestBuildBanks:
    def test_constant_image_single_background_bank(self):
        banks = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))
        assert set(banks) == {0}
        bank = banks[0]
        assert bank.count == 4
        gray = np.full(48, 0.5, dtype=np.float32)
        assert np.array_equal(bank.mean, gray)
        assert np.all(bank.vectors == gray)

    def test_disjoint_masks_counts_match_reextraction(self, rng):
        imgs = []
        for seed, cid in ((1, 1), (2, 2)):
            img = Image(rng.random((12, 12, 3)))
            bitmap = np.zeros((12, 12), dtype=bool)
            bitmap[:, :6] = True
            imgs.append((img, LabelMaskSet(12, 12, ((cid, bitmap),))))
        scale = ScaleSpec(4, 4)
        banks = build_banks(imgs, scale)
        counts: dict[int, int] = {}
        for img, masks in imgs:
            ps = extract_patches(img, masks, scale)
            for cid, idx in ps.class_indices().items():
                counts[cid] = counts.get(cid, 0) + len(idx)
        assert {cid: b.count for cid, b in banks.items()} == counts
        for cid, bank in banks.items():
            recomputed = bank.vectors.astype(np.float64).mean(axis=0)
            assert np.abs(recomputed - bank.mean.astype(np.float64)).max() <= 1e-5

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_banks([], ScaleSpec(4, 4))

    def test_rebuild_is_bit_identical(self):
        corpus = [(make_photo(16, 16), top_half_masks(16, 16))]
        a = build_banks(corpus, ScaleSpec(4, 4))
        b = build_banks(corpus, ScaleSpec(4, 4))
        assert set(a) == set(b)
        for cid in a:
            assert np.array_equal(a[cid].vectors, b[cid].vectors)
            assert np.array_equal(a[cid].mean, b[cid].mean)

    def test_pca_threshold_respected(self):
        corpus = [(make_photo(16, 16), LabelMaskSet.empty(16, 16))]
        plain = build_banks(corpus, ScaleSpec(4, 4))
        assert plain[0].pca is None and plain[0].quant is None
        forced = build_banks(corpus, ScaleSpec(4, 4), quantize=True)
        assert forced[0].pca is not None and forced[0].quant is not None
        low_threshold = build_banks(corpus, ScaleSpec(4, 4), pca_threshold=2)
        assert low_threshold[0].pca is not None
        assert DEFAULT_PCA_THRESHOLD == 1_000_000

    def test_quantized_mean_within_tolerance(self):
        corpus = [(make_photo(16, 16), LabelMaskSet.empty(16, 16))]
        bank = build_banks(corpus, ScaleSpec(4, 4), quantize=True)[0]
        tol = bank.quant.span() / 255.0 / 2.0 + 1e-7
        recomputed = bank.vectors.astype(np.float64).mean(axis=0)
        assert np.all(np.abs(recomputed - bank.mean.astype(np.float64)) <= tol)


class TestQuantParams:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip_tolerance(self, seed):
        rng = np.random.default_rng(seed)
        vectors = rng.random((16, 6)).astype(np.float32) * rng.random(6)
        qp = QuantParams.fit(vectors)
        recon = qp.dequantize(qp.quantize(vectors))
        tol = qp.span() / 255.0 / 2.0 + 1e-7
        assert np.all(np.abs(recon.astype(np.float64) - vectors) <= tol)

    def test_degenerate_dimension(self):
        vectors = np.full((5, 3), 0.25, dtype=np.float32)
        qp = QuantParams.fit(vectors)
        recon = qp.dequantize(qp.quantize(vectors))
        assert np.array_equal(recon, vectors)


class TestPca:
    def test_rows_orthonormal(self, rng):
        vectors = rng.random((40, 12)).astype(np.float32)
        mean = vectors.mean(axis=0)
        model = fit_pca(vectors, 5, mean)
        gram = model.components.astype(np.float64) @ model.components.astype(np.float64).T
        assert np.abs(gram - np.eye(5)).max() <= 1e-5

    def test_low_rank_reconstruction(self, rng):
        basis = rng.random((3, 10))
        coeffs = rng.random((30, 3))
        vectors = (coeffs @ basis).astype(np.float32)
        mean = vectors.astype(np.float64).mean(axis=0).astype(np.float32)
        model = fit_pca(vectors, 3, mean)
        z = model.project(vectors)
        recon = z @ model.components.astype(np.float64) + model.mean.astype(np.float64)
        assert np.abs(recon - vectors.astype(np.float64)).max() <= 1e-5

    def test_refit_identical(self, rng):
        vectors = rng.random((25, 8)).astype(np.float32)
        mean = vectors.mean(axis=0)
        a = fit_pca(vectors, 4, mean)
        b = fit_pca(vectors, 4, mean)
        assert np.array_equal(a.components, b.components)


class TestPersistence:
    def test_raw_round_trip_bit_exact(self, tmp_path):
        bank = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert loaded.class_id == bank.class_id
        assert loaded.scale == bank.scale
        assert np.array_equal(loaded.vectors, bank.vectors)
        assert np.array_equal(loaded.mean, bank.mean)
        assert loaded.quant is None and loaded.pca is None

    def test_quantized_round_trip_within_tolerance(self, tmp_path, rng):
        vectors = rng.random((50, 12)).astype(np.float32)
        raw = MemoryBank.from_vectors(1, ScaleSpec(2, 1), vectors)
        qp = QuantParams.fit(vectors)
        bank = MemoryBank(
            class_id=1,
            scale=ScaleSpec(2, 1),
            vectors=qp.dequantize(qp.quantize(vectors)),
            mean=raw.mean,
            quant=qp,
        )
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        loaded = load_bank(path)
        tol = qp.span() / 255.0 / 2.0 + 1e-7
        assert np.all(np.abs(loaded.vectors.astype(np.float64) - vectors) <= tol)
        # persistence of an already-dequantized bank is exact
        assert np.array_equal(loaded.vectors, bank.vectors)

    def test_pca_block_round_trip(self, tmp_path):
        corpus = [(make_photo(16, 16), LabelMaskSet.empty(16, 16))]
        bank = build_banks(corpus, ScaleSpec(4, 4), quantize=True)[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert np.array_equal(loaded.pca.components, bank.pca.components)
        assert np.array_equal(loaded.pca.mean, bank.pca.mean)
        assert np.array_equal(loaded.quant.lo, bank.quant.lo)
        assert np.array_equal(loaded.quant.hi, bank.quant.hi)

    def test_corrupted_byte_detected(self, tmp_path):
        bank = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_bank(path)

    def test_bad_magic(self, tmp_path):
        bank = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        # keep the trailer honest so the magic check is what fires
        import struct
        import zlib

        blob = blob[:-4]
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_bank(path)

    def test_unsupported_version(self, tmp_path):
        bank = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9  # version field follows the magic
        import struct
        import zlib

        blob = blob[:-4]
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_bank(path)

    def test_truncated_payload(self, tmp_path):
        bank = build_banks(solid_gray_corpus(), ScaleSpec(4, 4))[0]
        path = tmp_path / "bank.a2rb"
        save_bank(bank, path)
        blob = bytearray(path.read_bytes())[:-40]
        import struct
        import zlib

        blob = blob[:-4] if len(blob) >= 4 else blob
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="truncated"):
            load_bank(path)

    def test_bank_dir_round_trip(self, tmp_path):
        corpus = [(make_photo(16, 16), top_half_masks(16, 16))]
        by_scale = {
            ScaleSpec(4, 4): build_banks(corpus, ScaleSpec(4, 4)),
            ScaleSpec(8, 5): build_banks(corpus, ScaleSpec(8, 5)),
        }
        written = save_bank_dir(by_scale, tmp_path / "banks")
        assert {p.name for p in written} >= {"c0_s4.a2rb", "c1_s4.a2rb"}
        banks, indexes = load_bank_dir(tmp_path / "banks")
        assert set(banks) == {
            (cid, scale) for scale, group in by_scale.items() for cid in group
        }
        assert indexes == {}

    def test_bank_dir_same_size_scales_rejected(self, tmp_path):
        corpus = [(make_photo(16, 16), LabelMaskSet.empty(16, 16))]
        by_scale = {
            ScaleSpec(4, 4): build_banks(corpus, ScaleSpec(4, 4)),
            ScaleSpec(4, 2): build_banks(corpus, ScaleSpec(4, 2)),
        }
        with pytest.raises(ValueError, match="distinct"):
            save_bank_dir(by_scale, tmp_path / "banks")
