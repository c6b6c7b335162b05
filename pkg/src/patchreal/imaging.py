"""Images, semantic masks, and sliding-window patch extraction.

Pixels are floats in [0, 1], stored as an (height, width, 3) RGB array.
Patch vectors are the raw pixel values of a square window, flattened
row-major with interleaved channels, so a patch of size p has 3*p*p
elements.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image as _PILImage
from PIL import UnidentifiedImageError

from .errors import FormatError

BACKGROUND_CLASS = 0
DEFAULT_COVERAGE_THRESHOLD = 0.20


@dataclass(frozen=True)
class ScaleSpec:
    """One extraction grid: square patch edge and stride, both in pixels."""

    patch_size: int
    stride: int

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @classmethod
    def parse(cls, text: str) -> "ScaleSpec":
        """Parse ``WxH:stride`` text such as ``8x8:5``; W and H must match."""
        try:
            size_part, stride_part = text.split(":")
            w_part, h_part = size_part.lower().split("x")
            w, h, stride = int(w_part), int(h_part), int(stride_part)
        except ValueError:
            raise ValueError(f"bad scale {text!r}, expected WxH:stride") from None
        if w != h:
            raise ValueError(f"bad scale {text!r}: patches are square")
        return cls(w, stride)

    def __str__(self) -> str:
        return f"{self.patch_size}x{self.patch_size}:{self.stride}"


DEFAULT_SCALES: tuple[ScaleSpec, ...] = (
    ScaleSpec(4, 4),
    ScaleSpec(8, 5),
    ScaleSpec(16, 6),
)


@dataclass(frozen=True)
class Image:
    """RGB raster with float64 values in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image data must be (h, w, 3), got {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image has a zero dimension")
        if not np.isfinite(arr).all():
            raise ValueError("image data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image data outside [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LabelMaskSet:
    """Per-class binary masks over one image; masks may overlap.

    Class id 0 is reserved for the implicit background (pixels covered by
    no mask) and cannot appear as an explicit mask.
    """

    width: int
    height: int
    masks: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for class_id, bitmap in self.masks:
            if class_id <= 0:
                raise ValueError(f"mask class id must be positive, got {class_id}")
            if class_id in seen:
                raise ValueError(f"duplicate mask class id {class_id}")
            seen.add(class_id)
            if bitmap.shape != (self.height, self.width):
                raise ValueError(
                    f"mask {class_id} shape {bitmap.shape} does not match "
                    f"image dims {(self.height, self.width)}"
                )
            if bitmap.dtype != np.bool_:
                raise ValueError(f"mask {class_id} must be boolean")

    @classmethod
    def empty(cls, width: int, height: int) -> "LabelMaskSet":
        return cls(width=width, height=height, masks=())

    def background(self) -> np.ndarray:
        """Boolean raster of pixels covered by no mask."""
        covered = np.zeros((self.height, self.width), dtype=bool)
        for _, bitmap in self.masks:
            covered |= bitmap
        return ~covered

    def class_ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.masks)


@dataclass(frozen=True)
class PatchSet:
    """All patches of one image at one scale, in row-major grid order.

    ``origins`` holds (x, y) pixel offsets, ``vectors`` the flattened RGB
    windows, and ``classes`` the semantic classes each patch belongs to
    (always nonempty; (0,) when only background).
    """

    scale: ScaleSpec
    origins: np.ndarray
    vectors: np.ndarray
    classes: tuple[tuple[int, ...], ...]

    @property
    def dim(self) -> int:
        return self.scale.dim

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray, tuple[int, ...]]]:
        for i in range(len(self)):
            ox, oy = self.origins[i]
            yield int(ox), int(oy), self.vectors[i], self.classes[i]

    def class_indices(self) -> dict[int, np.ndarray]:
        """Patch indices per class id, ascending class order."""
        by_class: dict[int, list[int]] = {}
        for i, cs in enumerate(self.classes):
            for c in cs:
                by_class.setdefault(c, []).append(i)
        return {
            c: np.asarray(by_class[c], dtype=np.int64) for c in sorted(by_class)
        }


def load_image(path: str | Path) -> Image:
    """Load an 8-bit RGB PNG or binary PPM, scaling values to [0, 1].

    Non-RGB inputs (grayscale, palette, alpha) are rejected.
    """
    path = Path(path)
    try:
        with _PILImage.open(path) as im:
            mode = im.mode
            if mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB, got mode {mode}")
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FormatError(f"{path}: zero image dimension")
    return Image(arr / 255.0)


def save_png(image: Image, path: str | Path) -> None:
    """Write an image as an 8-bit RGB PNG."""
    u8 = np.clip(np.round(image.data * 255.0), 0, 255).astype(np.uint8)
    _PILImage.fromarray(u8, mode="RGB").save(Path(path), format="PNG")


def load_masks(directory: str | Path, dims: tuple[int, int]) -> LabelMaskSet:
    """Load a directory of ``<class_id>.png`` masks for an image of ``dims``.

    ``dims`` is (width, height). Each file must be a single-channel 8-bit
    raster of the same dims; a pixel > 0 marks membership. An empty or
    missing directory yields a set whose background covers everything.
    """
    width, height = dims
    directory = Path(directory)
    masks: list[tuple[int, np.ndarray]] = []
    seen: set[int] = set()
    if directory.is_dir():
        for path in sorted(directory.glob("*.png")):
            stem = path.stem
            if not stem.isdigit():
                raise FormatError(f"{path}: mask filename is not a class id")
            class_id = int(stem)
            if class_id in seen:
                raise FormatError(f"{path}: duplicate class id {class_id}")
            if class_id == BACKGROUND_CLASS:
                raise FormatError(f"{path}: class id 0 is reserved for background")
            seen.add(class_id)
            try:
                with _PILImage.open(path) as im:
                    if im.mode != "L":
                        raise FormatError(
                            f"{path}: expected single-channel 8-bit mask, got {im.mode}"
                        )
                    if im.size != (width, height):
                        raise FormatError(
                            f"{path}: mask size {im.size} does not match dims {dims}"
                        )
                    bitmap = np.asarray(im) > 0
            except (UnidentifiedImageError, OSError) as exc:
                raise FormatError(f"{path}: unreadable mask ({exc})") from exc
            masks.append((class_id, bitmap))
    masks.sort(key=lambda pair: pair[0])
    return LabelMaskSet(width=width, height=height, masks=tuple(masks))


def grid_count(length: int, patch_size: int, stride: int) -> int:
    """Number of window origins along one axis; 0 when the patch is too big."""
    if patch_size > length:
        return 0
    return (length - patch_size) // stride + 1


def extract_patches(
    img: Image,
    masks: LabelMaskSet,
    scale: ScaleSpec,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> PatchSet:
    """Extract the sliding-window patches of ``img`` and assign classes.

    A patch belongs to class c when at least ``coverage_threshold`` of its
    pixels lie inside mask c (inclusive bound); a patch clearing no
    threshold belongs to the background class 0. Trailing pixels that no
    full window reaches are dropped.
    """
    p, s = scale.patch_size, scale.stride
    h, w = img.height, img.width
    if p > min(w, h):
        raise ValueError(f"scale {scale} larger than image {w}x{h}")
    if not (0.0 < coverage_threshold <= 1.0):
        raise ValueError(f"coverage_threshold must be in (0, 1], got {coverage_threshold}")
    if (masks.width, masks.height) != (w, h):
        raise ValueError(
            f"mask dims {(masks.width, masks.height)} do not match image {(w, h)}"
        )

    ny, nx = grid_count(h, p, s), grid_count(w, p, s)
    n = ny * nx
    xs = np.arange(nx, dtype=np.int64) * s
    ys = np.arange(ny, dtype=np.int64) * s

    windows = np.lib.stride_tricks.sliding_window_view(img.data, (p, p), axis=(0, 1))
    windows = windows[::s, ::s]  # (ny, nx, 3, p, p)
    vectors = np.ascontiguousarray(
        windows.transpose(0, 1, 3, 4, 2).reshape(n, 3 * p * p)
    )
    gx, gy = np.meshgrid(xs, ys)  # row-major grid: y outer, x inner
    origins = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    area = float(p * p)
    membership: list[tuple[int, np.ndarray]] = []
    for class_id, bitmap in masks.masks:
        integral = np.zeros((h + 1, w + 1), dtype=np.int64)
        integral[1:, 1:] = bitmap.cumsum(axis=0).cumsum(axis=1)
        counts = (
            integral[np.ix_(ys + p, xs + p)]
            - integral[np.ix_(ys, xs + p)]
            - integral[np.ix_(ys + p, xs)]
            + integral[np.ix_(ys, xs)]
        )
        # Compare as a pixel fraction so exact-threshold coverage counts.
        member = (counts / area) >= coverage_threshold
        membership.append((class_id, member.reshape(-1)))

    classes: list[tuple[int, ...]] = []
    for i in range(n):
        cs = tuple(cid for cid, member in membership if member[i])
        classes.append(cs if cs else (BACKGROUND_CLASS,))

    return PatchSet(
        scale=scale, origins=origins, vectors=vectors, classes=tuple(classes)
    )
