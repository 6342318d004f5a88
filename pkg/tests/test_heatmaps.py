import numpy as np
import pytest

from skelpose.errors import DegenerateInput
from skelpose.heatmaps import (CrossHeatmap, VolumeBounds, decode_cross,
                               encode_cross, load_cross, memory_ratio_vs_volumetric,
                               project_to_plane, render_gaussian, save_cross,
                               soft_argmax2d, soft_argmax2d_backward)
from skelpose.rotations import random_rotation
from skelpose.skeleton import Skeleton, forward_kinematics

from oracles import central_diff, grad_mismatch


def random_pose_joints(skel, rng):
    g = random_rotation(rng)
    rel = np.array([random_rotation(rng) for _ in range(skel.num_bones)])
    return forward_kinematics(skel, g, rel).joints


class TestRenderGaussian:
    def test_centered_peak(self):
        h = render_gaussian((32, 32), 64, 64, sigma=1.0)
        assert h[32, 32] == 1.0
        assert np.unravel_index(np.argmax(h), h.shape) == (32, 32)

    def test_corner_value(self):
        h = render_gaussian((0, 0), 64, 64, sigma=1.0)
        assert abs(h[0, 1] - np.exp(-0.5)) < 1e-12
        assert abs(h[1, 0] - np.exp(-0.5)) < 1e-12

    def test_total_mass_2_pi_sigma_sq(self):
        # interior center, sigma=2: mass ~ 2*pi*sigma^2 = 8*pi within 1%
        h = render_gaussian((31.3, 30.8), 64, 64, sigma=2.0)
        assert abs(h.sum() - 8 * np.pi) / (8 * np.pi) < 0.01

    def test_off_grid_center_allowed(self):
        h = render_gaussian((-50, -50), 64, 64, sigma=1.0)
        assert h.max() < 1e-100


class TestSoftArgmax:
    def test_single_hot_pixel(self):
        h = np.zeros((64, 64))
        h[20, 10] = 1.0  # row 20, col 10 -> (u=10, v=20)
        (u, v), uniform = soft_argmax2d(h, temperature=0.02)
        assert not uniform
        assert abs(u - 10) < 1e-3 and abs(v - 20) < 1e-3

    def test_uniform_map_center(self):
        (u, v), uniform = soft_argmax2d(np.ones((64, 64)), temperature=0.1)
        assert uniform
        assert abs(u - 31.5) < 1e-9 and abs(v - 31.5) < 1e-9

    def test_gaussian_subpixel_recovery(self):
        h = render_gaussian((12.3, 40.7), 64, 64, sigma=2.0)
        (u, v), _ = soft_argmax2d(h, temperature=0.1)
        assert abs(u - 12.3) < 0.1 and abs(v - 40.7) < 0.1

    def test_translation_equivariance(self):
        h1 = render_gaussian((20.4, 25.6), 64, 64, sigma=1.5)
        h2 = render_gaussian((20.4 + 7, 25.6 + 5), 64, 64, sigma=1.5)
        c1, _ = soft_argmax2d(h1, 0.1)
        c2, _ = soft_argmax2d(h2, 0.1)
        assert np.allclose(c2 - c1, [7.0, 5.0], atol=1e-6)

    def test_gradients_match_fd(self, rng):
        worst = 0.0
        for _ in range(20):
            h = rng.uniform(0.1, 1.0, size=(12, 12))
            up = rng.normal(size=2)
            ana = soft_argmax2d_backward(h, 0.25, up)

            def f(hh):
                c, _ = soft_argmax2d(hh, 0.25)
                return float(up @ c)

            worst = max(worst, grad_mismatch(ana, central_diff(f, h)))
        assert worst < 1e-4


class TestEncodeDecode:
    def test_center_joint_peaks_at_32(self):
        bounds = VolumeBounds.cube(side=2000.0)
        ch = encode_cross(np.zeros((1, 3)), bounds, grid=64, sigma=1.0)
        assert np.unravel_index(np.argmax(ch.xy[0]), (64, 64)) == (32, 32)
        assert np.unravel_index(np.argmax(ch.zy[0]), (64, 64)) == (32, 32)

    def test_min_corner_peaks_at_zero(self):
        bounds = VolumeBounds.cube(side=2000.0)
        ch = encode_cross(np.array([bounds.lower]), bounds, grid=64, sigma=1.0)
        assert np.unravel_index(np.argmax(ch.xy[0]), (64, 64)) == (0, 0)
        assert np.unravel_index(np.argmax(ch.zy[0]), (64, 64)) == (0, 0)

    def test_out_of_bounds_flagged_and_clamped(self):
        bounds = VolumeBounds.cube(side=2000.0)
        ch = encode_cross(np.array([[5000.0, 0.0, 0.0]]), bounds)
        assert ch.out_of_bounds[0]
        assert np.isfinite(ch.xy).all()

    def test_round_trip_random_poses(self, skel, rng):
        # px equivalent: bounds side / grid
        for _ in range(25):
            joints = random_pose_joints(skel, rng)
            center = joints.mean(axis=0)
            half = np.max(np.abs(joints - center)) * 1.15 + 50.0
            bounds = VolumeBounds(lower=center - half, upper=center + half)
            ch = encode_cross(joints, bounds, grid=64, sigma=1.0)
            decoded, uniform = decode_cross(ch, bounds, temperature=0.1)
            assert not uniform.any()
            px_mm = 2 * half / 64.0
            err = np.max(np.abs(decoded - joints))
            assert err < 0.5 * px_mm

    def test_symmetric_pose_decodes_symmetric(self):
        bounds = VolumeBounds.cube(side=2000.0)
        joints = np.array([[300.0, 120.0, -40.0], [-300.0, 120.0, -40.0]])
        decoded, _ = decode_cross(encode_cross(joints, bounds), bounds)
        assert abs(decoded[0, 0] + decoded[1, 0]) < 1e-6
        assert abs(decoded[0, 1] - decoded[1, 1]) < 1e-9

    def test_mismatched_y_averages(self):
        bounds = VolumeBounds.cube(side=2000.0)
        grid = 64
        xy = render_gaussian((30, 10), grid, grid, 1.0)[None]
        zy = render_gaussian((30, 20), grid, grid, 1.0)[None]
        decoded, _ = decode_cross(CrossHeatmap(xy=xy, zy=zy), bounds, 0.1)
        y_px = (decoded[0, 1] - bounds.lower[1]) / (2000.0 / grid)
        assert abs(y_px - 15.0) < 0.05

    def test_memory_ratio_is_exactly_one_thirty_second(self):
        assert memory_ratio_vs_volumetric(16, 64, 64, 64) == 1.0 / 32.0

    def test_binary_round_trip(self, tmp_path, rng):
        ch = CrossHeatmap(xy=rng.uniform(size=(4, 16, 16)).astype("<f4").astype(float),
                          zy=rng.uniform(size=(4, 16, 16)).astype("<f4").astype(float))
        path = tmp_path / "maps.chm"
        save_cross(ch, path)
        again = load_cross(path)
        assert np.array_equal(again.xy, ch.xy)
        assert np.array_equal(again.zy, ch.zy)
        with open(path, "rb") as f:
            assert f.read(4) == b"CHM1"


class TestProjectToPlane:
    def test_square_spans_90_percent(self):
        joints = np.array([[0, 0, 0], [100, 0, 0], [0, 100, 0], [100, 100, 0.0]])
        px = project_to_plane(joints, target_width=16.0)
        span = px.max(axis=0) - px.min(axis=0)
        assert np.allclose(span, [14.4, 14.4], atol=1e-9)
        assert np.allclose(px.mean(axis=0), [8.0, 8.0], atol=1e-9)

    def test_translation_invariant(self, rng):
        joints = rng.normal(size=(10, 3)) * 300.0
        shifted = joints + np.array([123.0, -77.0, 999.0])
        assert np.allclose(project_to_plane(joints), project_to_plane(shifted), atol=1e-9)

    def test_max_extent_exact(self, rng):
        for _ in range(20):
            joints = rng.normal(size=(16, 3)) * 400.0
            px = project_to_plane(joints, target_width=16.0)
            span = np.max(px.max(axis=0) - px.min(axis=0))
            assert abs(span - 14.4) < 1e-9

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateInput):
            project_to_plane(np.zeros((5, 3)))
