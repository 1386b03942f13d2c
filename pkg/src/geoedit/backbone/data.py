"""Procedural training data: colored geometric shapes on textured backgrounds.

Every record carries an exact object mask and a template caption, so the same
generator feeds the trainer, the benchmark builder, and the smoke tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..imaging import ImageBuffer, MaskBuffer

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.65, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "purple": (0.6, 0.25, 0.7),
}
BACKGROUNDS = {
    "grass": (0.25, 0.5, 0.2),
    "sky": (0.5, 0.7, 0.95),
    "sand": (0.85, 0.75, 0.5),
    "slate": (0.45, 0.45, 0.5),
}


@dataclass(frozen=True)
class ShapeSample:
    image: ImageBuffer
    mask: MaskBuffer
    caption: str


def _textured_background(rng: np.random.Generator, h: int, w: int, base: tuple) -> np.ndarray:
    coarse = rng.uniform(-0.06, 0.06, size=(max(2, h // 8), max(2, w // 8)))
    noise = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=1)[:h, :w]
    img = np.empty((h, w, 3))
    for c in range(3):
        img[:, :, c] = base[c] + noise
    return np.clip(img, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, shape: str, h: int, w: int) -> np.ndarray:
    lo = max(3, min(h, w) // 6)
    hi = max(lo + 1, min(h, w) // 3)
    size = rng.integers(lo, hi)
    cx = rng.integers(size + 1, w - size - 1)
    cy = rng.integers(size + 1, h - size - 1)
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    if shape == "circle":
        return ((xs - cx) ** 2 + (ys - cy) ** 2 <= size**2).astype(np.uint8)
    if shape == "square":
        return ((np.abs(xs - cx) <= size) & (np.abs(ys - cy) <= size)).astype(np.uint8)
    # upward triangle: below the apex, inside the two slanted edges
    top, bottom = cy - size, cy + size
    frac = np.clip((ys - top) / (bottom - top), 0.0, 1.0)
    inside = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * size)
    return inside.astype(np.uint8)


def gen_shapes_dataset(n: int, seed: int, resolution: int = 64) -> list:
    """Deterministic list of `n` ShapeSample records for a given seed."""
    rng = np.random.default_rng(seed)
    records = []
    bg_names = sorted(BACKGROUNDS)
    color_names = sorted(COLORS)
    for _ in range(n):
        bg_name = bg_names[rng.integers(len(bg_names))]
        color_name = color_names[rng.integers(len(color_names))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        img = _textured_background(rng, resolution, resolution, BACKGROUNDS[bg_name])
        mask = _shape_mask(rng, shape, resolution, resolution)
        shade = 1.0 + rng.uniform(-0.1, 0.1)
        color = np.clip(np.array(COLORS[color_name]) * shade, 0.0, 1.0)
        img[mask == 1] = color
        caption = f"a {color_name} {shape} on {bg_name}"
        records.append(
            ShapeSample(
                image=ImageBuffer(img.astype(np.float32)),
                mask=MaskBuffer(mask),
                caption=caption,
            )
        )
    return records


def dataset_captions() -> list:
    """All caption strings the generator can emit (used by the collision audit)."""
    caps = []
    for color in sorted(COLORS):
        for shape in SHAPES:
            for bg in sorted(BACKGROUNDS):
                caps.append(f"a {color} {shape} on {bg}")
    return caps
