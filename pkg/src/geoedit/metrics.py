"""Evaluation measures over pluggable feature embedders.

Per-sample: warp error, mean point distance, subject/background consistency.
Corpus: Fréchet and polynomial-kernel distances between embedding sets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from . import geometry
from .imaging import ImageBuffer, MaskBuffer, mask_union


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------


class RandomProjectionEmbedder:
    """Seeded Gaussian projection of an area-averaged thumbnail; no learned weights."""

    def __init__(self, dim: int = 64, seed: int = 0, thumb: int = 16):
        self.name = f"randproj{dim}-s{seed}"
        self.dim = dim
        self.thumb = thumb
        rng = np.random.default_rng(seed)
        n_in = thumb * thumb * 3
        self._matrix = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)

    def __call__(self, image: ImageBuffer) -> np.ndarray:
        t = self.thumb
        small = np.stack(
            [
                ndimage.zoom(image.data[:, :, c], (t / image.height, t / image.width), order=1)
                for c in range(3)
            ],
            axis=2,
        )[:t, :t]
        if small.shape[:2] != (t, t):
            pad = ((0, t - small.shape[0]), (0, t - small.shape[1]), (0, 0))
            small = np.pad(small, pad, mode="edge")
        return small.reshape(-1) @ self._matrix


class BackboneEmbedder:
    """Pooled bottleneck activations of the toy denoiser at a fixed timestep."""

    def __init__(self, model, timestep: int = 50):
        self.model = model
        self.timestep = timestep
        self.dim = model.mid_block2.conv2.out_channels
        self.name = f"backbone-mid-t{timestep}"
        self._null = model.null_embedding()

    def __call__(self, image: ImageBuffer) -> np.ndarray:
        x = torch.from_numpy(np.transpose(image.data, (2, 0, 1)).copy())[None]
        captured = {}

        def hook(_mod, _inp, out):
            captured["mid"] = out

        handle = self.model.mid_block2.register_forward_hook(hook)
        try:
            with torch.no_grad():
                t = torch.full((1,), self.timestep, dtype=torch.long)
                self.model(x, t, self._null.tokens)
        finally:
            handle.remove()
        return captured["mid"][0].mean(dim=(1, 2)).numpy().astype(np.float64)


def save_embeddings(path, name: str, vectors: np.ndarray) -> None:
    """Columnar text: a header naming the embedder, then one vector per line."""
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"# embedder={name} dim={vectors.shape[1]}\n")
        for row in vectors:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_embeddings(path) -> tuple:
    """Returns (embedder name, (n, dim) array)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# embedder="):
            raise ValueError("embedding file lacks the embedder header")
        fields = dict(part.split("=", 1) for part in header[2:].split())
        rows = [np.fromstring(line, sep=" ") for line in fh if line.strip()]
    vectors = np.stack(rows) if rows else np.zeros((0, int(fields["dim"])))
    if vectors.shape[1] != int(fields["dim"]):
        raise ValueError("embedding rows disagree with header dim")
    return fields["embedder"], vectors


# ---------------------------------------------------------------------------
# per-sample metrics
# ---------------------------------------------------------------------------


def masked_l1(edited: ImageBuffer, reference: ImageBuffer, mask: MaskBuffer) -> float:
    """Mean absolute difference over the masked pixels (all channels)."""
    sel = mask.data == 1
    if not sel.any():
        raise ValueError("empty evaluation mask")
    diff = np.abs(edited.data[sel].astype(np.float64) - reference.data[sel].astype(np.float64))
    return float(diff.mean())


def warp_error(
    edited: ImageBuffer, source: ImageBuffer, transform: np.ndarray, target_mask: MaskBuffer
) -> float:
    """L1 between the edited image and the transform-warped source, inside the target mask."""
    warped = geometry.warp_image(source, transform)
    return masked_l1(edited, warped, target_mask)


def _to_gray(image: ImageBuffer) -> np.ndarray:
    return image.data @ np.array([0.299, 0.587, 0.114])


def corner_strength(image: ImageBuffer) -> np.ndarray:
    """Harris response on the grayscale image."""
    gray = _to_gray(image)
    iy, ix = np.gradient(gray)
    sxx = ndimage.uniform_filter(ix * ix, size=3)
    syy = ndimage.uniform_filter(iy * iy, size=3)
    sxy = ndimage.uniform_filter(ix * iy, size=3)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - 0.05 * trace * trace


def interest_points(image: ImageBuffer, mask: MaskBuffer, stride: int = 4) -> np.ndarray:
    """Uniform-grid points inside the mask, keeping the cornerier half; (n, 2) as (x, y)."""
    strength = corner_strength(image)
    ys, xs = np.mgrid[0 : image.height : stride, 0 : image.width : stride]
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    keep = mask.data[ys, xs] == 1
    ys, xs = ys[keep], xs[keep]
    if xs.size == 0:
        raise ValueError("no interest points inside the mask")
    s = strength[ys, xs]
    cutoff = np.median(s)
    sel = s >= cutoff
    if not sel.any():
        sel = np.ones_like(s, dtype=bool)
    return np.stack([xs[sel], ys[sel]], axis=1).astype(np.float64)


def oracle_provider(source: ImageBuffer, edited: ImageBuffer, pts_src, pts_pred) -> np.ndarray:
    """Returns the predicted targets verbatim; for tests and upper bounds."""
    return np.asarray(pts_pred, dtype=np.float64)


def ncc_provider(window: int = 11, radius: int = 8) -> Callable:
    """Correspondence by normalized cross-correlation patch search around the prediction."""
    half = window // 2

    def provider(source: ImageBuffer, edited: ImageBuffer, pts_src, pts_pred) -> np.ndarray:
        gs = _to_gray(source)
        ge = _to_gray(edited)
        h, w = ge.shape
        found = []
        for (sx, sy), (px, py) in zip(pts_src, pts_pred):
            sx, sy = int(round(sx)), int(round(sy))
            x0, x1 = sx - half, sx + half + 1
            y0, y1 = sy - half, sy + half + 1
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                found.append((px, py))
                continue
            patch = gs[y0:y1, x0:x1]
            pnorm = patch - patch.mean()
            pden = np.sqrt((pnorm**2).sum())
            best, best_xy = -np.inf, (px, py)
            cx, cy = int(round(px)), int(round(py))
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    tx, ty = cx + dx, cy + dy
                    if tx - half < 0 or ty - half < 0 or tx + half + 1 > w or ty + half + 1 > h:
                        continue
                    cand = ge[ty - half : ty + half + 1, tx - half : tx + half + 1]
                    cnorm = cand - cand.mean()
                    den = pden * np.sqrt((cnorm**2).sum())
                    score = (pnorm * cnorm).sum() / den if den > 0 else -np.inf
                    if score > best:
                        best, best_xy = score, (tx, ty)
            found.append(best_xy)
        return np.asarray(found, dtype=np.float64)

    return provider


def mean_distance(
    source: ImageBuffer,
    edited: ImageBuffer,
    source_mask: MaskBuffer,
    transform: Callable,
    provider: Callable,
    stride: int = 4,
) -> float:
    """Mean pixel distance between transformed interest points and their matches."""
    pts = interest_points(source, source_mask, stride=stride)
    pred = np.asarray(transform(pts), dtype=np.float64)
    corr = provider(source, edited, pts, pred)
    return float(np.linalg.norm(pred - corr, axis=1).mean())


def affine_point_transform(mat: np.ndarray) -> Callable:
    def apply(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        out = np.hstack([pts, ones]) @ mat.T
        return out[:, :2]

    return apply


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _masked_image(image: ImageBuffer, mask: MaskBuffer) -> ImageBuffer:
    return ImageBuffer(image.data * mask.data[:, :, None])


def subject_consistency(
    source: ImageBuffer, edited: ImageBuffer, source_mask: MaskBuffer, target_mask: MaskBuffer, embedder
) -> float:
    """Cosine similarity of the masked-foreground embeddings."""
    a = embedder(_masked_image(source, source_mask))
    b = embedder(_masked_image(edited, target_mask))
    return cosine_similarity(a, b)


def background_consistency(
    source: ImageBuffer, edited: ImageBuffer, source_mask: MaskBuffer, target_mask: MaskBuffer, embedder
) -> float:
    """Cosine similarity of the embeddings with both object regions masked out."""
    bg = mask_union(source_mask, target_mask).complement()
    a = embedder(_masked_image(source, bg))
    b = embedder(_masked_image(edited, bg))
    return cosine_similarity(a, b)


# ---------------------------------------------------------------------------
# corpus metrics
# ---------------------------------------------------------------------------


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), symmetric-eigh route."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("embedding sets must be (n, dim) with matching dim")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(inner)
    vals = np.where(vals < 1e-10, np.clip(vals, 0.0, None), vals)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dim = x.shape[1]
    return (x @ y.T / dim + 1.0) ** 3


def kernel_distance(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two vectors per set")
    kaa = _poly_kernel(a, a)
    kbb = _poly_kernel(b, b)
    kab = _poly_kernel(a, b)
    n, m = a.shape[0], b.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "record",
    "instruction",
    "op",
    "direction",
    "magnitude",
    "difficulty",
    "warp_error",
    "warp_error_baseline",
    "mean_distance",
    "subject_consistency",
    "background_consistency",
)


@dataclass
class MetricReport:
    per_sample: list = field(default_factory=list)
    corpus: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.per_sample:
            md = row.get("mean_distance")
            if md is not None and md < 0:
                raise ValueError("mean distance must be >= 0")

    def summary(self) -> dict:
        """Corpus values plus per-sample means; consistencies clamped to [0, 1] here."""
        out = dict(self.corpus)
        clamped = ("subject_consistency", "background_consistency")
        if self.per_sample:
            for key in ("warp_error", "warp_error_baseline", "mean_distance",
                        "subject_consistency", "background_consistency"):
                vals = [row[key] for row in self.per_sample if row.get(key) is not None]
                if vals:
                    if key in clamped:
                        vals = [min(1.0, max(0.0, v)) for v in vals]
                    out[f"mean_{key}"] = float(np.mean(vals))
        out["samples"] = len(self.per_sample)
        return out

    def write_csv(self, path) -> None:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.per_sample:
            cells = []
            for col in CSV_COLUMNS:
                v = row.get(col)
                if isinstance(v, float):
                    cells.append(format(v, ".6f"))
                else:
                    cells.append("" if v is None else str(v))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_summary(self, path) -> None:
        payload = {"summary": self.summary(), "config": self.config}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
