"""Raster primitives: images, binary masks, morphology, blending, resolution mapping.

Images are real-valued in [0, 1] internally; 8-bit only at the PNG boundary.
All operations are pure functions over immutable buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


class DimensionMismatch(ValueError):
    """Raised when paired buffers disagree on height/width."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageBuffer:
    """Dense RGB raster, values in [0, 1], row-major float32 of shape (h, w, 3)."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("image must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MaskBuffer:
    """Binary raster of shape (h, w) with values exactly 0 or 1 (uint8)."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"mask must have shape (h, w), got {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("mask must be non-empty")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        else:
            vals = np.unique(arr)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("mask values must be exactly 0 or 1")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def is_full(self) -> bool:
        return bool(self.data.all())

    def complement(self) -> "MaskBuffer":
        return MaskBuffer(1 - self.data)


def _check_same_shape(*buffers) -> None:
    shapes = {(b.height, b.width) for b in buffers}
    if len(shapes) > 1:
        raise DimensionMismatch(f"buffer dimensions differ: {sorted(shapes)}")


def dilate(mask: MaskBuffer, radius: float) -> MaskBuffer:
    """Morphological dilation with a Euclidean disk structuring element.

    Radius 0 is the identity. A pixel is set iff its distance to the
    nearest set input pixel is <= radius.
    """
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0 or mask.is_empty() or mask.is_full():
        return mask
    dist = ndimage.distance_transform_edt(mask.data == 0)
    return MaskBuffer(dist <= radius)


def boundary_mask(mask: MaskBuffer, radius: float) -> MaskBuffer:
    """Ring around a mask: dilate(mask, radius) minus the mask itself."""
    if radius <= 0:
        raise ValueError("boundary radius must be > 0")
    grown = dilate(mask, radius)
    return MaskBuffer(grown.data & (1 - mask.data))


def blend(fg: ImageBuffer, bg: ImageBuffer, mask: MaskBuffer) -> ImageBuffer:
    """Per-pixel select: fg where mask is set, bg elsewhere."""
    _check_same_shape(fg, bg, mask)
    out = np.where(mask.data[:, :, None] == 1, fg.data, bg.data)
    return ImageBuffer(out)


def downsample_mask(mask: MaskBuffer, target_h: int, target_w: int) -> MaskBuffer:
    """Map a mask onto a coarser grid: area-average pooling, threshold 0.5, ties -> 1."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    if (target_h, target_w) == (mask.height, mask.width):
        return mask
    avg = _area_average(mask.data.astype(np.float64), target_h, target_w)
    return MaskBuffer(avg >= 0.5)


def _area_average(arr: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Exact box average of each target cell's (possibly fractional) source rectangle."""
    wh = _overlap_weights(arr.shape[0], target_h)
    ww = _overlap_weights(arr.shape[1], target_w)
    return wh @ arr @ ww.T


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    # weights[j, i] = |cell_j ∩ pixel_i| / cell width, cells of size src/dst
    step = src / dst
    w = np.zeros((dst, src), dtype=np.float64)
    for j in range(dst):
        lo, hi = j * step, (j + 1) * step
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, src)):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / step


def mask_union(a: MaskBuffer, b: MaskBuffer) -> MaskBuffer:
    _check_same_shape(a, b)
    return MaskBuffer(a.data | b.data)


def mask_area_fraction(mask: MaskBuffer) -> float:
    return float(mask.data.sum()) / (mask.height * mask.width)


def load_png(path) -> ImageBuffer:
    """Load an 8-bit PNG as an RGB image with values in [0, 1]."""
    img = Image.open(path).convert("RGB")
    return ImageBuffer(np.asarray(img, dtype=np.float32) / 255.0)


def load_mask_png(path) -> MaskBuffer:
    """Load an 8-bit grayscale PNG as a binary mask: value >= 128 decodes to 1."""
    img = Image.open(path).convert("L")
    return MaskBuffer(np.asarray(img) >= 128)


def save_png(buffer, path) -> None:
    """Save an ImageBuffer as 8-bit RGB or a MaskBuffer as 8-bit grayscale."""
    if isinstance(buffer, ImageBuffer):
        arr = np.clip(np.rint(buffer.data * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    elif isinstance(buffer, MaskBuffer):
        Image.fromarray(buffer.data * 255, mode="L").save(path, format="PNG")
    else:
        raise TypeError(f"cannot save {type(buffer).__name__} as PNG")
