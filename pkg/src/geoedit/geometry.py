"""Object transformation: 2D affine warps and depth-based 3D edits.

Produces the coarse edited image and the target-region mask consumed by the
inpainting/refinement stages. Coordinates are (x, y) = (column, row); the
affine matrix acts on homogeneous pixel coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .imaging import ImageBuffer, MaskBuffer


class OutOfBoundsError(ValueError):
    """Transformed object left the image frame."""


@dataclass(frozen=True)
class AffineParams:
    """2D edit parameters: anisotropic scale, rotation (degrees, CCW), translation (px)."""

    s_x: float = 1.0
    s_y: float = 1.0
    phi: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0

    def __post_init__(self):
        if not (self.s_x > 0 and self.s_y > 0):
            raise ValueError("scale factors must be positive")
        for v in (self.s_x, self.s_y, self.phi, self.t_x, self.t_y):
            if not math.isfinite(v):
                raise ValueError("affine parameters must be finite")

    def is_identity(self) -> bool:
        return (self.s_x, self.s_y, self.phi, self.t_x, self.t_y) == (1.0, 1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length and principal point, in pixels."""

    f: float
    c_x: float
    c_y: float

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.c_x], [0.0, self.f, self.c_y], [0.0, 0.0, 1.0]])

    @staticmethod
    def default_for(h: int, w: int) -> "CameraIntrinsics":
        # f = max(h, w), principal point at the image center
        return CameraIntrinsics(f=float(max(h, w)), c_x=(w - 1) / 2.0, c_y=(h - 1) / 2.0)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel relative depth, shape (h, w); must be positive where the object lives."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("depth map contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Rotation3DParams:
    """Rigid rotation about a principal axis; pivot defaults to the lifted centroid."""

    axis: str
    angle: float
    pivot: Optional[tuple] = None

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"axis must be one of x/y/z, got {self.axis!r}")
        if not math.isfinite(self.angle):
            raise ValueError("angle must be finite")


def affine_matrix(p: AffineParams, pivot: tuple = (0.0, 0.0)) -> np.ndarray:
    """Unified scale/rotate/translate matrix, rotation and scaling about `pivot`.

    With pivot (0, 0) this is
    [[s_x cosphi, -s_y sin phi, t_x], [s_x sin phi, s_y cos phi, t_y], [0, 0, 1]].
    """
    phi = math.radians(p.phi)
    c, s = math.cos(phi), math.sin(phi)
    lin = np.array([[p.s_x * c, -p.s_y * s], [p.s_x * s, p.s_y * c]])
    px, py = float(pivot[0]), float(pivot[1])
    offset = np.array([px, py]) - lin @ np.array([px, py]) + np.array([p.t_x, p.t_y])
    mat = np.eye(3)
    mat[:2, :2] = lin
    mat[:2, 2] = offset
    return mat


def mask_centroid(mask: MaskBuffer) -> tuple:
    """(x, y) centroid of the set pixels."""
    ys, xs = np.nonzero(mask.data)
    if xs.size == 0:
        raise ValueError("mask is empty")
    return (float(xs.mean()), float(ys.mean()))


def _inverse_map(mat: np.ndarray, h: int, w: int):
    """Source (x, y) coordinates for every output pixel under inverse mapping."""
    inv = np.linalg.inv(mat)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return src_x, src_y


def warp_image(img: ImageBuffer, mat: np.ndarray, fill: float = 0.0) -> ImageBuffer:
    """Inverse-mapping warp with bilinear sampling; out-of-domain pixels take `fill`."""
    h, w = img.height, img.width
    src_x, src_y = _inverse_map(mat, h, w)
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    x0 = np.clip(np.floor(src_x), 0, w - 1).astype(np.intp)
    y0 = np.clip(np.floor(src_y), 0, h - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[:, :, None]
    fy = (src_y - y0)[:, :, None]
    data = img.data.astype(np.float64)
    out = (
        data[y0, x0] * (1 - fx) * (1 - fy)
        + data[y0, x1] * fx * (1 - fy)
        + data[y1, x0] * (1 - fx) * fy
        + data[y1, x1] * fx * fy
    )
    out = np.where(inside[:, :, None], out, fill)
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32))


def warp_mask(mask: MaskBuffer, mat: np.ndarray) -> MaskBuffer:
    """Inverse-mapping warp with nearest-neighbor sampling; output stays binary."""
    h, w = mask.height, mask.width
    src_x, src_y = _inverse_map(mat, h, w)
    xi = np.rint(src_x).astype(np.intp)
    yi = np.rint(src_y).astype(np.intp)
    inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
    out = np.zeros((h, w), dtype=np.uint8)
    out[inside] = mask.data[yi[inside], xi[inside]]
    return MaskBuffer(out)


def mask_in_bounds(mask: MaskBuffer, mat: np.ndarray) -> bool:
    """True iff every forward-mapped set pixel center stays inside the frame."""
    ys, xs = np.nonzero(mask.data)
    if xs.size == 0:
        return False
    tx = mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2]
    ty = mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2]
    h, w = mask.height, mask.width
    return bool(np.all((tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)))


def transform_2d(
    img: ImageBuffer, mask: MaskBuffer, p: AffineParams, pivot: Optional[tuple] = None
) -> tuple:
    """Warp the masked object; returns (coarse image, target mask).

    The warped object is composited on top of the source inside the warped
    mask; the vacated source region is left untouched (cleanup happens in the
    inpainting stage). Identity parameters are a strict no-op.
    """
    if mask.is_empty():
        raise ValueError("source mask is empty")
    if p.is_identity():
        return img, mask
    if pivot is None:
        pivot = mask_centroid(mask)
    mat = affine_matrix(p, pivot)
    target = warp_mask(mask, mat)
    if target.is_empty():
        raise OutOfBoundsError("out of bounds: transformed object left the frame")
    warped = warp_image(img, mat, fill=0.0)
    coarse = np.where(target.data[:, :, None] == 1, warped.data, img.data)
    return ImageBuffer(coarse), target


def lift_points(mask: MaskBuffer, depth: DepthMap, intr: CameraIntrinsics) -> tuple:
    """Back-project masked pixels to 3D: one (point, color-slot) pair per pixel.

    Returns (points (n,3), pixel coords (n,2)); colors are looked up by the
    caller so the lift stays image-independent.
    """
    if (mask.height, mask.width) != (depth.height, depth.width):
        raise ValueError("mask and depth dimensions differ")
    ys, xs = np.nonzero(mask.data)
    if xs.size == 0:
        raise ValueError("mask is empty")
    d = depth.data[ys, xs]
    if np.any(d <= 0):
        raise ValueError("depth must be positive inside the mask")
    px = (xs - intr.c_x) / intr.f * d
    py = (ys - intr.c_y) / intr.f * d
    points = np.stack([px, py, d], axis=1)
    pixels = np.stack([xs, ys], axis=1)
    return points, pixels


def _axis_rotation(axis: str, angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotate_points(points: np.ndarray, r: Rotation3DParams) -> np.ndarray:
    """Rigid rotation about the pivot (defaults to the point centroid)."""
    pivot = np.asarray(r.pivot, dtype=np.float64) if r.pivot is not None else points.mean(axis=0)
    rot = _axis_rotation(r.axis, r.angle)
    return (points - pivot) @ rot.T + pivot


def reproject(
    points: np.ndarray, colors: np.ndarray, intr: CameraIntrinsics, h: int, w: int
) -> tuple:
    """Perspective-project points back to the image grid with z-buffering.

    Points with non-positive depth are dropped. One-pixel-wide holes are
    filled from the nearer of an opposing covered neighbor pair; the returned
    mask marks coverage after hole filling.
    """
    z = points[:, 2]
    keep = z > 0
    points, colors, z = points[keep], colors[keep], z[keep]
    if points.shape[0] == 0:
        return ImageBuffer(np.zeros((h, w, 3), dtype=np.float32)), MaskBuffer(np.zeros((h, w), np.uint8))
    px = intr.f * points[:, 0] / z + intr.c_x
    py = intr.f * points[:, 1] / z + intr.c_y
    xi = np.rint(px).astype(np.intp)
    yi = np.rint(py).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    xi, yi, z, colors = xi[inside], yi[inside], z[inside], colors[inside]

    zbuf = np.full((h, w), np.inf)
    img = np.zeros((h, w, 3), dtype=np.float64)
    # nearest depth wins per pixel
    order = np.argsort(-z, kind="stable")
    zbuf[yi[order], xi[order]] = z[order]
    img[yi[order], xi[order]] = colors[order]
    covered = np.isfinite(zbuf)

    img, covered = _fill_slit_holes(img, zbuf, covered)
    return ImageBuffer(np.clip(img, 0.0, 1.0).astype(np.float32)), MaskBuffer(covered)


def _fill_slit_holes(img: np.ndarray, zbuf: np.ndarray, covered: np.ndarray):
    """Fill uncovered pixels flanked by covered pixels on opposite sides (radius 1)."""
    h, w = covered.shape
    pad_cov = np.pad(covered, 1, constant_values=False)
    pad_z = np.pad(zbuf, 1, constant_values=np.inf)
    pad_img = np.pad(img, ((1, 1), (1, 1), (0, 0)))

    def shifted(arr, dy, dx):
        return arr[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    horiz = shifted(pad_cov, 0, -1) & shifted(pad_cov, 0, 1)
    vert = shifted(pad_cov, -1, 0) & shifted(pad_cov, 1, 0)
    hole = ~covered & (horiz | vert)
    if not hole.any():
        return img, covered
    out = img.copy()
    for y, x in zip(*np.nonzero(hole)):
        best = np.inf
        for dy, dx in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            if (dy == 0 and not horiz[y, x]) or (dx == 0 and not vert[y, x]):
                continue
            zz = pad_z[1 + y + dy, 1 + x + dx]
            if zz < best:
                best = zz
                out[y, x] = pad_img[1 + y + dy, 1 + x + dx]
    return out, covered | hole


def transform_3d(
    img: ImageBuffer,
    mask: MaskBuffer,
    depth: DepthMap,
    intr: CameraIntrinsics,
    r: Rotation3DParams,
) -> tuple:
    """Lift the masked object to 3D, rotate, reproject, composite; returns (I_c, M_t)."""
    points, pixels = lift_points(mask, depth, intr)
    colors = img.data[pixels[:, 1], pixels[:, 0]].astype(np.float64)
    rotated = rotate_points(points, r)
    sparse, target = reproject(rotated, colors, intr, img.height, img.width)
    if target.is_empty():
        raise OutOfBoundsError("out of bounds: object left the view frustum")
    coarse = np.where(target.data[:, :, None] == 1, sparse.data, img.data)
    return ImageBuffer(coarse), target


def points_in_bounds(points: np.ndarray, intr: CameraIntrinsics, h: int, w: int) -> bool:
    """True iff all points project inside the frame with positive depth."""
    z = points[:, 2]
    if np.any(z <= 0):
        return False
    px = intr.f * points[:, 0] / z + intr.c_x
    py = intr.f * points[:, 1] / z + intr.c_y
    return bool(np.all((px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)))


def synthetic_depth(kind: str, h: int, w: int, **params) -> DepthMap:
    """Procedural depth maps standing in for a learned estimator.

    kinds: constant (value), ramp (near/far along axis), sphere (spherical
    bump of given radius protruding from a constant background plane).
    """
    if kind == "constant":
        value = float(params.get("value", 1.0))
        data = np.full((h, w), value)
    elif kind == "ramp":
        near = float(params.get("near", 1.0))
        far = float(params.get("far", 2.0))
        axis = params.get("axis", "x")
        t = np.linspace(0.0, 1.0, w if axis == "x" else h)
        line = near + (far - near) * t
        data = np.tile(line, (h, 1)) if axis == "x" else np.tile(line[:, None], (1, w))
    elif kind == "sphere":
        base = float(params.get("base", 2.0))
        radius = float(params.get("radius", min(h, w) / 4.0))
        bump = float(params.get("bump", 0.5))
        cx = float(params.get("c_x", (w - 1) / 2.0))
        cy = float(params.get("c_y", (h - 1) / 2.0))
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        cap = np.sqrt(np.clip(radius**2 - d2, 0.0, None)) / radius
        data = base - bump * cap
    else:
        raise ValueError(f"unknown synthetic depth kind {kind!r}")
    return DepthMap(data)


def save_depth_png(depth: DepthMap, path) -> float:
    """Store depth as 16-bit grayscale PNG; returns the scale factor for the manifest."""
    peak = float(depth.data.max())
    scale = peak / 65535.0 if peak > 0 else 1.0
    q = np.clip(np.rint(depth.data / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")
    return scale


def load_depth_png(path, scale: float) -> DepthMap:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return DepthMap(arr * scale)
