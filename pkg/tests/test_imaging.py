from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import write_png
from patchreal.errors import FormatError
from patchreal.imaging import (
    BACKGROUND_CLASS,
    Image,
    LabelMaskSet,
    ScaleSpec,
    extract_patches,
    grid_count,
    load_image,
    load_masks,
    save_png,
)


class TestLoadImage:
    def test_all_black(self, tmp_path):
        write_png(tmp_path / "b.png", np.zeros((2, 2, 3), dtype=np.uint8))
        img = load_image(tmp_path / "b.png")
        assert img.width == 2 and img.height == 2
        assert np.all(img.data == 0.0)

    def test_white_pixel_scales_to_one(self, tmp_path):
        write_png(tmp_path / "w.png", np.full((1, 1, 3), 255, dtype=np.uint8))
        img = load_image(tmp_path / "w.png")
        assert np.array_equal(img.data.reshape(-1), [1.0, 1.0, 1.0])

    def test_division_by_255(self, tmp_path):
        # oracle: plain scalar division of the channel values
        write_png(tmp_path / "p.png", np.array([[[128, 64, 0]]], dtype=np.uint8))
        img = load_image(tmp_path / "p.png")
        expected = np.array([128 / 255, 64 / 255, 0.0])
        assert np.allclose(img.data.reshape(-1), expected, atol=1e-12)
        assert img.data.reshape(-1)[0] == pytest.approx(0.50196, abs=1e-5)
        assert img.data.reshape(-1)[1] == pytest.approx(0.25098, abs=1e-5)

    def test_ppm_p6(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
        img = load_image(path)
        assert img.data[0, 0, 0] == 1.0 and img.data[0, 1, 1] == 1.0

    def test_grayscale_rejected(self, tmp_path):
        write_png(tmp_path / "g.png", np.zeros((2, 2), dtype=np.uint8), mode="L")
        with pytest.raises(FormatError, match="RGB"):
            load_image(tmp_path / "g.png")

    def test_unreadable_rejected(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not an image")
        with pytest.raises(FormatError):
            load_image(tmp_path / "junk.png")

    def test_zero_dimension_rejected(self, tmp_path):
        (tmp_path / "z.ppm").write_bytes(b"P6\n0 5\n255\n")
        with pytest.raises(FormatError):
            load_image(tmp_path / "z.ppm")

    def test_png_round_trip(self, tmp_path):
        rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 4
        write_png(tmp_path / "a.png", rgb)
        img = load_image(tmp_path / "a.png")
        save_png(img, tmp_path / "b.png")
        again = load_image(tmp_path / "b.png")
        assert np.array_equal(img.data, again.data)


class TestLoadMasks:
    def test_empty_dir_all_background(self, tmp_path):
        masks = load_masks(tmp_path, (4, 4))
        assert masks.masks == ()
        assert masks.background().sum() == 16

    def test_single_full_mask(self, tmp_path):
        write_png(tmp_path / "7.png", np.full((4, 4), 255, dtype=np.uint8), mode="L")
        masks = load_masks(tmp_path, (4, 4))
        assert masks.class_ids() == (7,)
        assert masks.masks[0][1].all()
        assert not masks.background().any()

    def test_two_masks_with_overlap(self, tmp_path):
        # oracle: explicit pixel counts on constructed 8x2 rasters
        m1 = np.zeros((2, 8), dtype=np.uint8)
        m1[:, :5] = 255  # 10 px
        m2 = np.zeros((2, 8), dtype=np.uint8)
        m2[:, 3:] = 255  # 10 px, overlap columns 3..4 -> 4 px = 25%
        write_png(tmp_path / "1.png", m1, mode="L")
        write_png(tmp_path / "2.png", m2, mode="L")
        masks = load_masks(tmp_path, (8, 2))
        assert masks.class_ids() == (1, 2)
        b1, b2 = masks.masks[0][1], masks.masks[1][1]
        assert b1.sum() == 10 and b2.sum() == 10
        assert (b1 & b2).sum() == 4
        assert masks.background().sum() == 16 - (b1 | b2).sum()

    def test_dimension_mismatch(self, tmp_path):
        write_png(tmp_path / "1.png", np.zeros((4, 4), dtype=np.uint8), mode="L")
        with pytest.raises(FormatError, match="size"):
            load_masks(tmp_path, (5, 4))

    def test_non_numeric_name(self, tmp_path):
        write_png(tmp_path / "sky.png", np.zeros((2, 2), dtype=np.uint8), mode="L")
        with pytest.raises(FormatError, match="class id"):
            load_masks(tmp_path, (2, 2))

    def test_duplicate_class_id(self, tmp_path):
        write_png(tmp_path / "1.png", np.zeros((2, 2), dtype=np.uint8), mode="L")
        write_png(tmp_path / "01.png", np.zeros((2, 2), dtype=np.uint8), mode="L")
        with pytest.raises(FormatError, match="duplicate"):
            load_masks(tmp_path, (2, 2))

    def test_rgb_mask_rejected(self, tmp_path):
        write_png(tmp_path / "1.png", np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(FormatError, match="single-channel"):
            load_masks(tmp_path, (2, 2))

    def test_explicit_background_file_rejected(self, tmp_path):
        write_png(tmp_path / "0.png", np.zeros((2, 2), dtype=np.uint8), mode="L")
        with pytest.raises(FormatError, match="reserved"):
            load_masks(tmp_path, (2, 2))


def _flat_image(width, height, seed=0):
    rng = np.random.default_rng(seed)
    return Image(rng.random((height, width, 3)))


class TestExtractPatches:
    @pytest.mark.parametrize(
        "scale,expected",
        [(ScaleSpec(16, 6), 1681), (ScaleSpec(4, 4), 4096), (ScaleSpec(8, 5), 2500)],
    )
    def test_grid_counts_256(self, scale, expected):
        assert grid_count(256, scale.patch_size, scale.stride) ** 2 == expected

    def test_counts_match_enumeration(self):
        img = _flat_image(33, 21)
        masks = LabelMaskSet.empty(33, 21)
        scale = ScaleSpec(5, 3)
        ps = extract_patches(img, masks, scale)
        origins = oracles.grid_origins(33, 21, 5, 3)
        assert len(ps) == len(origins)
        assert [tuple(o) for o in ps.origins] == origins

    def test_vectors_round_trip(self):
        img = _flat_image(17, 13, seed=3)
        ps = extract_patches(img, LabelMaskSet.empty(17, 13), ScaleSpec(4, 3))
        for ox, oy, vec, _ in ps:
            assert np.array_equal(
                vec, oracles.patch_vector(img.data, ox, oy, 4)
            )

    def test_background_when_no_mask(self):
        img = _flat_image(8, 8)
        ps = extract_patches(img, LabelMaskSet.empty(8, 8), ScaleSpec(4, 4))
        assert all(cs == (BACKGROUND_CLASS,) for cs in ps.classes)

    def test_threshold_boundary_inclusive(self):
        # 10x10 patch, 20 member pixels: coverage exactly 20%
        img = _flat_image(10, 10)
        bitmap = np.zeros((10, 10), dtype=bool)
        bitmap[:2, :] = True
        masks = LabelMaskSet(width=10, height=10, masks=((3, bitmap),))
        ps = extract_patches(img, masks, ScaleSpec(10, 1), coverage_threshold=0.20)
        assert ps.classes == ((3,),)

    def test_below_threshold_is_background(self):
        img = _flat_image(16, 16)
        bitmap = np.zeros((16, 16), dtype=bool)
        bitmap.reshape(-1)[:51] = True  # 51/256 < 20%
        masks = LabelMaskSet(width=16, height=16, masks=((3, bitmap),))
        ps = extract_patches(img, masks, ScaleSpec(16, 1))
        assert ps.classes == ((BACKGROUND_CLASS,),)
        bitmap.reshape(-1)[51] = True  # 52/256 >= 20%
        ps = extract_patches(img, masks, ScaleSpec(16, 1))
        assert ps.classes == ((3,),)

    def test_multi_class_assignment(self):
        img = _flat_image(4, 4)
        left = np.zeros((4, 4), dtype=bool)
        left[:, :2] = True
        right = np.zeros((4, 4), dtype=bool)
        right[:, 2:] = True
        masks = LabelMaskSet(width=4, height=4, masks=((1, left), (2, right)))
        ps = extract_patches(img, masks, ScaleSpec(4, 1))
        assert ps.classes == ((1, 2),)

    def test_classes_match_brute_force(self, rng):
        img = Image(rng.random((14, 18, 3)))
        mask_list = []
        for cid in (1, 2, 5):
            mask_list.append((cid, rng.random((14, 18)) > 0.6))
        masks = LabelMaskSet(width=18, height=14, masks=tuple(mask_list))
        ps = extract_patches(img, masks, ScaleSpec(4, 3))
        for ox, oy, _, classes in ps:
            assert classes == oracles.patch_classes(mask_list, ox, oy, 4, 0.20)

    def test_mask_growth_is_monotone(self, rng):
        img = Image(rng.random((12, 12, 3)))
        small = rng.random((12, 12)) > 0.7
        grown = small | (rng.random((12, 12)) > 0.7)
        before = extract_patches(
            img, LabelMaskSet(12, 12, ((1, small),)), ScaleSpec(4, 2)
        )
        after = extract_patches(
            img, LabelMaskSet(12, 12, ((1, grown),)), ScaleSpec(4, 2)
        )
        for cs_before, cs_after in zip(before.classes, after.classes):
            if 1 in cs_before:
                assert 1 in cs_after

    def test_per_class_counts_vs_total(self, rng):
        img = Image(rng.random((16, 16, 3)))
        m1 = rng.random((16, 16)) > 0.5
        masks = LabelMaskSet(16, 16, ((1, m1), (2, ~m1)))
        ps = extract_patches(img, masks, ScaleSpec(4, 4))
        by_class = ps.class_indices()
        assert sum(len(v) for v in by_class.values()) >= len(ps)
        # disjoint exhaustive halves at full-patch granularity
        top = np.zeros((16, 16), dtype=bool)
        top[:8] = True
        masks2 = LabelMaskSet(16, 16, ((1, top), (2, ~top)))
        ps2 = extract_patches(img, masks2, ScaleSpec(8, 8), coverage_threshold=1.0)
        by_class2 = ps2.class_indices()
        assert sum(len(v) for v in by_class2.values()) == len(ps2)

    def test_scale_larger_than_image(self):
        img = _flat_image(8, 8)
        with pytest.raises(ValueError, match="larger"):
            extract_patches(img, LabelMaskSet.empty(8, 8), ScaleSpec(9, 1))

    @settings(max_examples=60, deadline=None)
    @given(
        width=st.integers(4, 32),
        height=st.integers(4, 32),
        patch=st.integers(1, 8),
        stride=st.integers(1, 6),
    )
    def test_count_formula_matches_enumeration(self, width, height, patch, stride):
        if patch > min(width, height):
            return
        expected = len(oracles.grid_origins(width, height, patch, stride))
        got = grid_count(width, patch, stride) * grid_count(height, patch, stride)
        assert got == expected

    def test_corpus_scale_arithmetic(self):
        # 2048 photos at 256x256 with 16/6 windows
        assert 2048 * grid_count(256, 16, 6) ** 2 == 3_442_688
