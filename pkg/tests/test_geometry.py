import math

import numpy as np
import pytest

from geoedit.geometry import (
    AffineParams,
    CameraIntrinsics,
    DepthMap,
    OutOfBoundsError,
    Rotation3DParams,
    affine_matrix,
    lift_points,
    load_depth_png,
    mask_centroid,
    mask_in_bounds,
    points_in_bounds,
    reproject,
    rotate_points,
    save_depth_png,
    synthetic_depth,
    transform_2d,
    transform_3d,
    warp_image,
    warp_mask,
)
from geoedit.imaging import ImageBuffer, MaskBuffer


def apply(mat, x, y):
    v = mat @ np.array([x, y, 1.0])
    return v[0], v[1]


def disk_mask(h, w, cy, cx, r):
    ys, xs = np.mgrid[0:h, 0:w]
    return MaskBuffer(((ys - cy) ** 2 + (xs - cx) ** 2 <= r * r).astype(np.uint8))


def square_mask(h, w, y0, y1, x0, x1):
    arr = np.zeros((h, w), dtype=np.uint8)
    arr[y0:y1, x0:x1] = 1
    return MaskBuffer(arr)


class TestAffineMatrix:
    def test_identity(self):
        assert np.array_equal(affine_matrix(AffineParams()), np.eye(3))

    def test_rotation_90(self):
        mat = affine_matrix(AffineParams(phi=90.0))
        x, y = apply(mat, 1.0, 0.0)
        assert x == pytest.approx(0.0, abs=1e-12)
        assert y == pytest.approx(1.0, abs=1e-12)

    def test_pure_translation(self):
        mat = affine_matrix(AffineParams(t_x=51.2, t_y=0.0))
        assert apply(mat, 100.0, 200.0) == pytest.approx((151.2, 200.0))

    def test_composition(self):
        a = AffineParams(phi=31.0, t_x=2.0, t_y=-1.0)
        b = AffineParams(phi=47.0, t_x=-3.0, t_y=5.0)
        m = affine_matrix(b) @ affine_matrix(a)
        # rotate by a.phi, translate by a.t, then rotate by b.phi, translate by b.t
        phi_b = math.radians(b.phi)
        rot_b = np.array(
            [[math.cos(phi_b), -math.sin(phi_b)], [math.sin(phi_b), math.cos(phi_b)]]
        )
        t = rot_b @ np.array([a.t_x, a.t_y]) + np.array([b.t_x, b.t_y])
        expected = affine_matrix(AffineParams(phi=a.phi + b.phi))
        expected[:2, 2] = t
        assert np.abs(m - expected).max() <= 1e-9

    def test_pivot_is_fixed_point(self):
        mat = affine_matrix(AffineParams(phi=30.0, s_x=2.0, s_y=2.0), pivot=(5.0, 7.0))
        assert apply(mat, 5.0, 7.0) == pytest.approx((5.0, 7.0))

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            AffineParams(s_x=0.0)


class TestWarps:
    def test_identity_warp_bit_equal(self):
        rng = np.random.default_rng(0)
        img = ImageBuffer(rng.random((12, 12, 3)).astype(np.float32))
        out = warp_image(img, np.eye(3))
        assert np.array_equal(out.data, img.data)

    def test_mask_warp_stays_binary_and_in_bounds(self):
        mask = disk_mask(16, 16, 8, 8, 4)
        mat = affine_matrix(AffineParams(t_x=30.0))
        out = warp_mask(mask, mat)
        assert set(np.unique(out.data)) <= {0, 1}

    def test_translation_shifts_mask(self):
        mask = square_mask(16, 16, 4, 8, 4, 8)
        out = warp_mask(mask, affine_matrix(AffineParams(t_x=5.0, t_y=0.0)))
        expected = np.zeros((16, 16), dtype=np.uint8)
        expected[4:8, 9:13] = 1
        assert np.array_equal(out.data, expected)

    def test_fill_outside(self):
        img = ImageBuffer(np.ones((8, 8, 3), dtype=np.float32))
        out = warp_image(img, affine_matrix(AffineParams(t_x=6.0)), fill=0.0)
        assert out.data[:, :6].min() == 0.0  # newly exposed strip takes fill


class TestTransform2D:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(1)
        img = ImageBuffer(rng.random((16, 16, 3)).astype(np.float32))
        mask = disk_mask(16, 16, 8, 8, 3)
        coarse, target = transform_2d(img, mask, AffineParams())
        assert coarse is img and target is mask

    def test_translation_pixel_set(self):
        rng = np.random.default_rng(2)
        img = ImageBuffer(rng.random((16, 16, 3)).astype(np.float32))
        mask = square_mask(16, 16, 6, 10, 2, 6)
        coarse, target = transform_2d(img, mask, AffineParams(t_x=4.0))
        shifted = np.zeros_like(mask.data)
        shifted[6:10, 6:10] = 1
        assert np.array_equal(target.data, shifted)
        # source region untouched, warped object pasted at the target
        assert np.array_equal(coarse.data[6:10, 2:6], img.data[6:10, 2:6])
        assert np.allclose(coarse.data[6:10, 6:10], img.data[6:10, 2:6], atol=1e-6)

    def test_out_of_bounds_error(self):
        img = ImageBuffer(np.zeros((16, 16, 3), dtype=np.float32))
        mask = square_mask(16, 16, 0, 3, 0, 3)
        with pytest.raises(OutOfBoundsError):
            transform_2d(img, mask, AffineParams(t_x=40.0))

    def test_empty_mask_rejected(self):
        img = ImageBuffer(np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            transform_2d(img, MaskBuffer(np.zeros((8, 8), np.uint8)), AffineParams())

    def test_mask_in_bounds_detects_exit(self):
        mask = square_mask(16, 16, 6, 10, 12, 16)
        assert not mask_in_bounds(mask, affine_matrix(AffineParams(t_x=4.0)))
        assert mask_in_bounds(mask, affine_matrix(AffineParams(t_x=-4.0)))


class TestLift:
    def test_principal_point(self):
        intr = CameraIntrinsics(f=50.0, c_x=8.0, c_y=6.0)
        mask = square_mask(16, 16, 6, 7, 8, 9)  # single pixel at (x=8, y=6)
        depth = DepthMap(np.full((16, 16), 2.5))
        pts, pix = lift_points(mask, depth, intr)
        assert pts.shape == (1, 3)
        assert pts[0] == pytest.approx([0.0, 0.0, 2.5])

    def test_unit_tangent(self):
        f = 4.0
        intr = CameraIntrinsics(f=f, c_x=2.0, c_y=3.0)
        mask = square_mask(16, 16, 3, 4, 6, 7)  # pixel at (c_x + f, c_y)
        depth = DepthMap(np.full((16, 16), 1.7))
        pts, _ = lift_points(mask, depth, intr)
        assert pts[0] == pytest.approx([1.7, 0.0, 1.7])

    def test_matches_inverse_matrix_oracle(self):
        rng = np.random.default_rng(3)
        intr = CameraIntrinsics(f=37.0, c_x=7.5, c_y=9.5)
        mask = MaskBuffer((rng.random((20, 20)) < 0.2).astype(np.uint8))
        depth = DepthMap(rng.uniform(0.5, 3.0, (20, 20)))
        pts, pix = lift_points(mask, depth, intr)
        k_inv = np.linalg.inv(intr.matrix())
        for p, (x, y) in zip(pts, pix):
            d = depth.data[y, x]
            expected = k_inv @ np.array([x, y, 1.0]) * d
            assert np.abs(p - expected).max() <= 1e-9

    def test_nonpositive_depth_rejected(self):
        intr = CameraIntrinsics(f=10.0, c_x=4.0, c_y=4.0)
        mask = square_mask(8, 8, 2, 4, 2, 4)
        with pytest.raises(ValueError):
            lift_points(mask, DepthMap(np.zeros((8, 8))), intr)


class TestRotatePoints:
    def test_zero_angle_identity(self):
        pts = np.random.default_rng(4).random((10, 3))
        out = rotate_points(pts, Rotation3DParams(axis="y", angle=0.0, pivot=(0, 0, 0)))
        assert np.abs(out - pts).max() <= 1e-12

    def test_y_axis_180(self):
        out = rotate_points(
            np.array([[1.0, 0.0, 1.0]]), Rotation3DParams(axis="y", angle=180.0, pivot=(0, 0, 0))
        )
        assert out[0] == pytest.approx([-1.0, 0.0, -1.0], abs=1e-12)

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_composition(self, axis):
        rng = np.random.default_rng(5)
        pts = rng.random((8, 3))
        pivot = (0.3, -0.2, 1.1)
        a, b = 23.0, 41.0
        once = rotate_points(
            rotate_points(pts, Rotation3DParams(axis, a, pivot)), Rotation3DParams(axis, b, pivot)
        )
        combined = rotate_points(pts, Rotation3DParams(axis, a + b, pivot))
        assert np.abs(once - combined).max() <= 1e-9


class TestReproject:
    def test_round_trip_half_pixel(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            h = w = 24
            intr = CameraIntrinsics(
                f=float(rng.uniform(10, 60)), c_x=float(rng.uniform(8, 16)), c_y=float(rng.uniform(8, 16))
            )
            mask = disk_mask(h, w, 12, 12, 6)
            depth = DepthMap(rng.uniform(0.5, 4.0, (h, w)))
            pts, pix = lift_points(mask, depth, intr)
            z = pts[:, 2]
            px = intr.f * pts[:, 0] / z + intr.c_x
            py = intr.f * pts[:, 1] / z + intr.c_y
            err = np.hypot(px - pix[:, 0], py - pix[:, 1])
            assert err.max() <= 0.5

    def test_nonpositive_depth_dropped(self):
        intr = CameraIntrinsics(f=10.0, c_x=4.0, c_y=4.0)
        pts = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]])
        colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        img, mask = reproject(pts, colors, intr, 8, 8)
        assert mask.data.sum() == 1
        assert img.data[4, 4] == pytest.approx([0, 1.0, 0])

    def test_z_buffer_keeps_nearest(self):
        intr = CameraIntrinsics(f=10.0, c_x=4.0, c_y=4.0)
        pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
        colors = np.array([[1.0, 0, 0], [0, 0, 1.0]])
        img, mask = reproject(pts, colors, intr, 8, 8)
        assert img.data[4, 4] == pytest.approx([0, 0, 1.0])

    def test_slit_hole_filled(self):
        intr = CameraIntrinsics(f=8.0, c_x=4.0, c_y=4.0)
        # two columns of points leaving a one-pixel vertical gap at x=4
        pts, colors = [], []
        for y in range(2, 7):
            for x in (3, 5):
                d = 2.0
                pts.append([(x - 4) / 8 * d, (y - 4) / 8 * d, d])
                colors.append([0.5, 0.5, 0.5])
        img, mask = reproject(np.array(pts), np.array(colors), intr, 9, 9)
        assert mask.data[4, 4] == 1  # the slit pixel is covered after filling


class TestTransform3D:
    def _setup(self, h=32, w=32):
        rng = np.random.default_rng(8)
        img = ImageBuffer(rng.random((h, w, 3)).astype(np.float32))
        mask = square_mask(h, w, 12, 20, 12, 20)
        depth = DepthMap(np.full((h, w), 2.0))
        intr = CameraIntrinsics.default_for(h, w)
        return img, mask, depth, intr

    def test_zero_rotation_round_trip(self):
        img, mask, depth, intr = self._setup()
        coarse, target = transform_3d(img, mask, depth, intr, Rotation3DParams("y", 0.0))
        covered = (target.data & mask.data).sum()
        assert covered >= 0.99 * mask.data.sum()
        sel = (target.data & mask.data) == 1
        assert np.array_equal(coarse.data[sel], img.data[sel])

    def test_y_rotation_foreshortens(self):
        img, mask, depth, intr = self._setup()
        angle = 10.0
        _, target = transform_3d(img, mask, depth, intr, Rotation3DParams("y", angle))
        # analytic: corners of the frontal plane rotate about the centroid pivot
        pts, pix = lift_points(mask, depth, intr)
        rotated = rotate_points(pts, Rotation3DParams("y", angle))
        px = intr.f * rotated[:, 0] / rotated[:, 2] + intr.c_x
        projected_extent = px.max() - px.min()
        original_extent = pix[:, 0].max() - pix[:, 0].min()
        assert projected_extent < original_extent  # strict horizontal foreshortening
        xs = np.nonzero(target.data)[1]
        width = xs.max() - xs.min() + 1
        assert width <= original_extent + 1
        assert width == pytest.approx(projected_extent + 1, abs=1.5)

    def test_behind_camera_raises(self):
        img, mask, depth, intr = self._setup()
        with pytest.raises(OutOfBoundsError):
            transform_3d(img, mask, depth, intr, Rotation3DParams("x", 180.0, pivot=(0, 0, 0)))

    def test_points_in_bounds(self):
        _, mask, depth, intr = self._setup()
        pts, _ = lift_points(mask, depth, intr)
        assert points_in_bounds(pts, intr, 32, 32)
        assert not points_in_bounds(pts * np.array([30.0, 1.0, 1.0]), intr, 32, 32)


class TestSyntheticDepth:
    @pytest.mark.parametrize("kind", ["constant", "ramp", "sphere"])
    def test_positive(self, kind):
        depth = synthetic_depth(kind, 16, 16)
        assert (depth.data > 0).all()

    def test_ramp_monotone(self):
        depth = synthetic_depth("ramp", 8, 8, near=1.0, far=3.0, axis="x")
        assert depth.data[0, 0] == pytest.approx(1.0)
        assert depth.data[0, -1] == pytest.approx(3.0)

    def test_sphere_bump_closer_at_center(self):
        depth = synthetic_depth("sphere", 17, 17, base=2.0, bump=0.5)
        assert depth.data[8, 8] == pytest.approx(1.5)
        assert depth.data[0, 0] == pytest.approx(2.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synthetic_depth("perlin", 8, 8)


class TestDepthIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        depth = DepthMap(rng.uniform(0.5, 7.0, (16, 16)))
        path = tmp_path / "d.png"
        scale = save_depth_png(depth, path)
        back = load_depth_png(path, scale)
        assert np.abs(back.data - depth.data).max() <= scale / 2 + 1e-9
