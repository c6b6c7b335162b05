from __future__ import annotations

import numpy as np
import pytest
from PIL import Image as PILImage

from patchreal.imaging import Image, LabelMaskSet


def make_photo(width: int, height: int, seed: int = 7, contrast: float = 0.35) -> Image:
    """Smooth synthetic 'photo': low-frequency waves plus mild texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    base = np.stack(
        [
            0.5 + contrast * np.sin(2 * np.pi * (xx + 0.3 * yy)),
            0.5 + contrast * np.cos(2 * np.pi * (yy - 0.2 * xx)),
            0.5 + contrast * np.sin(2 * np.pi * (xx * yy + 0.1)),
        ],
        axis=2,
    )
    noise = rng.normal(0.0, 0.02, size=base.shape)
    return Image(np.clip(base + noise, 0.0, 1.0))


def top_half_masks(width: int, height: int, class_id: int = 1) -> LabelMaskSet:
    bitmap = np.zeros((height, width), dtype=bool)
    bitmap[: height // 2, :] = True
    return LabelMaskSet(width=width, height=height, masks=((class_id, bitmap),))


def write_png(path, arr_u8: np.ndarray, mode: str = "RGB") -> None:
    PILImage.fromarray(arr_u8, mode=mode).save(path, format="PNG")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def photo32() -> Image:
    return make_photo(32, 32)


@pytest.fixture
def masks32(photo32) -> LabelMaskSet:
    return top_half_masks(photo32.width, photo32.height)
