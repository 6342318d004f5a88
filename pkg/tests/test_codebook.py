import numpy as np
import pytest

from skelpose.codebook import RotationCodebook, blend, build_codebook, classify
from skelpose.errors import DegenerateInput, InsufficientData
from skelpose.rotations import from_axis_angle, gram_schmidt, random_rotation

from oracles import nearest_center_bruteforce, weighted_blend_bruteforce


def jittered(rng, base, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return base @ from_axis_angle(axis, np.radians(max_deg) * rng.uniform())


class TestBuildCodebook:
    def test_single_cluster_of_identical_samples(self, rng):
        r = random_rotation(rng)
        cb = build_codebook(np.tile(r, (5, 1, 1)), n_clusters=1, seed=0)
        assert cb.K == 1
        assert np.allclose(cb.centers[0], r, atol=1e-12)

    def test_two_tight_clusters_recover_means(self, rng):
        a = np.eye(3)
        b = from_axis_angle([0, 0, 1], np.pi)
        samples = [jittered(rng, a, 3.0) for _ in range(40)]
        samples += [jittered(rng, b, 3.0) for _ in range(40)]
        samples = np.array(samples)
        cb = build_codebook(samples, n_clusters=2, seed=1)
        # centers must equal the arithmetic means of their assigned members
        assign = np.array([classify(cb, s)[0] for s in samples])
        for k in range(2):
            members = samples[assign == k]
            assert len(members) == 40
            assert np.allclose(cb.centers[k], members.mean(axis=0), atol=1e-6)

    def test_beats_shuffled_assignment(self, rng):
        samples = np.array([random_rotation(rng) for _ in range(600)])
        cb = build_codebook(samples, n_clusters=20, seed=0)
        x = samples.reshape(-1, 9)
        assign = np.array([classify(cb, s)[0] for s in samples])
        centers = cb.centers.reshape(-1, 9)
        wcss = np.sum((x - centers[assign]) ** 2)
        shuffled = assign.copy()
        rng.shuffle(shuffled)
        wcss_shuffled = np.sum((x - centers[shuffled]) ** 2)
        assert wcss <= wcss_shuffled

    def test_deterministic_given_seed(self, rng):
        samples = np.array([random_rotation(rng) for _ in range(50)])
        cb1 = build_codebook(samples, n_clusters=5, seed=7)
        cb2 = build_codebook(samples, n_clusters=5, seed=7)
        assert np.array_equal(cb1.centers, cb2.centers)

    def test_insufficient_data(self, rng):
        samples = np.array([random_rotation(rng) for _ in range(3)])
        with pytest.raises(InsufficientData):
            build_codebook(samples, n_clusters=4, seed=0)

    def test_kmeans_fixed_point(self, rng):
        # members classify back to the center they contributed to
        samples = np.array([jittered(rng, random_rotation(rng), 2.0) for _ in range(30)])
        cb = build_codebook(samples, n_clusters=3, seed=0)
        assign = np.array([classify(cb, s)[0] for s in samples])
        for k in range(3):
            members = samples[assign == k]
            if len(members):
                assert np.allclose(cb.centers[k], members.mean(axis=0), atol=1e-9)


class TestClassify:
    def test_center_maps_to_itself(self, rng):
        centers = np.array([random_rotation(rng) for _ in range(6)])
        cb = RotationCodebook(centers=centers)
        idx, onehot = classify(cb, centers[4])
        assert idx == 4
        assert onehot[4] == 1.0 and onehot.sum() == 1.0

    def test_tie_goes_to_lowest_index(self):
        # centers 3 and 7 equidistant from the query
        centers = np.tile(np.eye(3), (8, 1, 1)) * 5.0  # far away
        centers[3] = np.eye(3) * 2.0
        centers[7] = np.eye(3) * 2.0
        cb = RotationCodebook(centers=centers)
        idx, _ = classify(cb, np.eye(3))
        assert idx == 3

    def test_matches_bruteforce(self, rng):
        centers = np.array([random_rotation(rng) for _ in range(40)])
        cb = RotationCodebook(centers=centers)
        for _ in range(200):
            r = random_rotation(rng)
            assert classify(cb, r)[0] == nearest_center_bruteforce(centers, r)


class TestBlend:
    def test_one_hot_returns_center(self, rng):
        centers = np.array([random_rotation(rng) for _ in range(5)])
        cb = RotationCodebook(centers=centers)
        p = np.zeros(5)
        p[2] = 1.0
        assert np.array_equal(blend(cb, p), centers[2])

    def test_degenerate_blend_then_gs_raises(self):
        cb = RotationCodebook(centers=np.array([np.eye(3), np.diag([-1.0, -1.0, 1.0])]))
        blended = blend(cb, np.array([0.5, 0.5]))
        assert np.allclose(blended, np.diag([0.0, 0.0, 1.0]))
        with pytest.raises(DegenerateInput):
            gram_schmidt(blended)

    def test_matches_weighted_sum_oracle(self, rng):
        centers = np.array([random_rotation(rng) for _ in range(9)])
        cb = RotationCodebook(centers=centers)
        p = rng.uniform(size=9)
        p /= p.sum()
        assert np.allclose(blend(cb, p), weighted_blend_bruteforce(centers, p), atol=1e-12)

    def test_linear_in_probabilities(self, rng):
        centers = np.array([random_rotation(rng) for _ in range(4)])
        cb = RotationCodebook(centers=centers)
        p = rng.uniform(size=4)
        p /= p.sum()
        q = rng.uniform(size=4)
        q /= q.sum()
        a = 0.3
        lhs = blend(cb, a * p + (1 - a) * q)
        rhs = a * blend(cb, p) + (1 - a) * blend(cb, q)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_gs_of_one_hot_blend_near_center_for_tight_cluster(self, rng):
        base = [random_rotation(rng) for _ in range(3)]
        samples = np.array([jittered(rng, b, 5.0) for b in base for _ in range(30)])
        cb = build_codebook(samples, n_clusters=3, seed=0)
        for k in range(3):
            onehot = np.zeros(3)
            onehot[k] = 1.0
            q = gram_schmidt(blend(cb, onehot))
            assert np.linalg.norm(q - cb.centers[k]) < 1e-2

    def test_json_round_trip(self, rng, tmp_path):
        centers = np.array([random_rotation(rng) for _ in range(3)])
        cb = RotationCodebook(centers=centers)
        cb.save(tmp_path / "cb.json")
        again = RotationCodebook.load(tmp_path / "cb.json")
        assert np.allclose(again.centers, cb.centers)
