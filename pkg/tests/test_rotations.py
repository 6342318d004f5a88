import numpy as np
import pytest

from skelpose.errors import DegenerateInput
from skelpose.rotations import (AxisAngle, from_axis_angle, geodesic_deg,
                                gram_schmidt, gram_schmidt_backward, is_rotation,
                                random_rotation, to_axis_angle)

from oracles import central_diff, grad_mismatch, textbook_gram_schmidt


class TestGramSchmidt:
    def test_identity_passthrough(self):
        assert np.allclose(gram_schmidt(np.eye(3)), np.eye(3), atol=1e-12)

    def test_uniform_scale_removed(self):
        assert np.allclose(gram_schmidt(2.0 * np.eye(3)), np.eye(3), atol=1e-12)

    def test_orthonormal_and_proper(self, rng):
        for _ in range(500):
            q = gram_schmidt(rng.normal(size=(3, 3)))
            assert np.linalg.norm(q.T @ q - np.eye(3)) < 1e-9
            assert abs(np.linalg.det(q) - 1.0) < 1e-9

    def test_matches_textbook_oracle(self, rng):
        # column-by-column match up to the det-sign fix on column 3
        for _ in range(200):
            m = rng.normal(size=(3, 3))
            if np.linalg.cond(m) > 1e4:
                continue
            q = gram_schmidt(m)
            ref = textbook_gram_schmidt(m)
            assert np.allclose(q[:, 0], ref[:, 0], atol=1e-9)
            assert np.allclose(q[:, 1], ref[:, 1], atol=1e-9)
            sign = 1.0 if np.linalg.det(ref) > 0 else -1.0
            assert np.allclose(q[:, 2], sign * ref[:, 2], atol=1e-9)

    def test_idempotent_on_rotations(self, rng):
        for _ in range(100):
            r = random_rotation(rng)
            assert np.linalg.norm(gram_schmidt(r) - r) < 1e-9

    def test_scale_invariant_in_leading_column(self, rng):
        for s in (0.1, 1.0, 7.5):
            m = rng.normal(size=(3, 3))
            scaled = m @ np.diag([s, 1.0, 1.0])
            assert np.allclose(gram_schmidt(scaled), gram_schmidt(m), atol=1e-9)

    def test_det_minus_one_input_is_fixed(self, rng):
        r = random_rotation(rng) @ np.diag([1.0, 1.0, -1.0])  # improper
        q = gram_schmidt(r)
        assert abs(np.linalg.det(q) - 1.0) < 1e-9

    def test_degenerate_inputs_raise(self):
        m = np.zeros((3, 3))
        with pytest.raises(DegenerateInput):
            gram_schmidt(m)
        m = np.eye(3)
        m[:, 1] = m[:, 0]  # parallel columns
        with pytest.raises(DegenerateInput):
            gram_schmidt(m)
        m = np.eye(3)
        m[:, 2] = m[:, 0] + m[:, 1]  # third in span of first two
        with pytest.raises(DegenerateInput):
            gram_schmidt(m)


class TestGramSchmidtBackward:
    def test_zero_upstream(self, rng):
        m = rng.normal(size=(3, 3))
        assert np.allclose(gram_schmidt_backward(m, np.zeros((3, 3))), 0.0)

    def test_identity_input_matches_fd(self, rng):
        g = rng.normal(size=(3, 3))
        ana = gram_schmidt_backward(np.eye(3), g)
        num = central_diff(lambda m: float(np.sum(g * gram_schmidt(m))), np.eye(3))
        assert grad_mismatch(ana, num) < 1e-5

    def test_random_sweep_matches_fd(self, rng):
        worst = 0.0
        for _ in range(100):
            m = rng.normal(size=(3, 3))
            if np.linalg.cond(m) > 100:
                continue
            g = rng.normal(size=(3, 3))
            ana = gram_schmidt_backward(m, g)
            num = central_diff(lambda mm: float(np.sum(g * gram_schmidt(mm))), m)
            worst = max(worst, grad_mismatch(ana, num))
        assert worst < 1e-4

    def test_linear_in_upstream(self, rng):
        m = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        g1 = rng.normal(size=(3, 3))
        g2 = rng.normal(size=(3, 3))
        lhs = gram_schmidt_backward(m, 2.0 * g1 + 0.5 * g2)
        rhs = 2.0 * gram_schmidt_backward(m, g1) + 0.5 * gram_schmidt_backward(m, g2)
        assert np.allclose(lhs, rhs, atol=1e-10)


class TestAxisAngle:
    def test_identity(self):
        aa = to_axis_angle(np.eye(3))
        assert aa.angle == 0.0
        assert np.allclose(aa.axis, [1.0, 0.0, 0.0])

    def test_quarter_turn_about_z(self):
        aa = to_axis_angle(from_axis_angle([0, 0, 1], np.pi / 2))
        assert np.allclose(aa.axis, [0, 0, 1], atol=1e-12)
        assert abs(aa.angle - np.pi / 2) < 1e-12

    def test_rodrigues_basics(self):
        assert np.allclose(from_axis_angle([0, 0, 1], 0.0), np.eye(3))
        assert np.allclose(from_axis_angle([0, 0, 1], np.pi), np.diag([-1.0, -1.0, 1.0]),
                           atol=1e-15)

    def test_inverse_composition(self, rng):
        axis = rng.normal(size=3)
        r = from_axis_angle(axis, 1.1)
        assert np.allclose(r @ from_axis_angle(axis, -1.1), np.eye(3), atol=1e-15)

    def test_round_trip_random(self, rng):
        for _ in range(300):
            r = random_rotation(rng)
            aa = to_axis_angle(r)
            assert 0.0 <= aa.angle <= np.pi
            assert abs(np.linalg.norm(aa.axis) - 1.0) < 1e-9
            assert np.linalg.norm(from_axis_angle(aa.axis, aa.angle) - r) < 1e-8

    @pytest.mark.parametrize("delta", [0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3])
    def test_round_trip_near_pi(self, rng, delta):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        r = from_axis_angle(axis, np.pi - delta)
        aa = to_axis_angle(r)
        assert np.linalg.norm(from_axis_angle(aa.axis, aa.angle) - r) < 1e-8

    def test_axis_angle_is_named_tuple(self):
        aa = AxisAngle(np.array([1.0, 0, 0]), 0.5)
        axis, angle = aa
        assert angle == 0.5


class TestGeodesic:
    def test_zero_for_equal(self, rng):
        r = random_rotation(rng)
        assert geodesic_deg(r, r) < 1e-7

    def test_ninety_degrees(self, rng):
        axis = rng.normal(size=3)
        r = from_axis_angle(axis, np.pi / 2)
        assert abs(geodesic_deg(np.eye(3), r) - 90.0) < 1e-9

    def test_symmetric(self, rng):
        for _ in range(50):
            r1, r2 = random_rotation(rng), random_rotation(rng)
            assert abs(geodesic_deg(r1, r2) - geodesic_deg(r2, r1)) < 1e-9

    def test_triangle_inequality(self, rng):
        for _ in range(100):
            r1, r2, r3 = (random_rotation(rng) for _ in range(3))
            d12 = geodesic_deg(r1, r2)
            d23 = geodesic_deg(r2, r3)
            d13 = geodesic_deg(r1, r3)
            assert d13 <= d12 + d23 + 1e-9

    def test_range(self, rng):
        for _ in range(100):
            d = geodesic_deg(random_rotation(rng), random_rotation(rng))
            assert 0.0 <= d <= 180.0


def test_is_rotation(rng):
    assert is_rotation(random_rotation(rng))
    assert not is_rotation(np.diag([1.0, 1.0, -1.0]))
    assert not is_rotation(2 * np.eye(3))
