import itertools

import numpy as np
import pytest
import torch

from pcdistill.geometry import (
    MetricConfig,
    PointCloud,
    chamfer_distance,
    denormalize,
    emd_distance,
    f1_score,
    nearest_neighbors,
    normalize,
)
from pcdistill.losses import chamfer_loss


def random_cloud(rng, n):
    return PointCloud(rng.normal(size=(n, 3)))


def brute_chamfer(a, b, gamma=1.0):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return gamma * d2.min(1).mean() + d2.min(0).mean()


class TestPointCloud:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))


class TestNormalize:
    def test_identity_on_unit_sphere_cloud(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(64, 3))
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        v -= v.mean(axis=0)
        v /= np.max(np.linalg.norm(v, axis=1))
        res = normalize(PointCloud(v))
        np.testing.assert_allclose(res.cloud.points, v, atol=1e-12)
        np.testing.assert_allclose(res.center, 0.0, atol=1e-12)
        assert res.scale == pytest.approx(1.0)
        assert not res.degenerate

    def test_two_point_symmetry(self):
        res = normalize(PointCloud([[0.0, 0, 0], [2.0, 0, 0]]))
        np.testing.assert_allclose(res.cloud.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-12)
        np.testing.assert_allclose(res.center, [1, 0, 0], atol=1e-12)
        assert res.scale == pytest.approx(1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        cloud = PointCloud(rng.normal(size=(64, 3)) * 3.0 + 5.0)
        res = normalize(cloud)
        assert np.abs(res.cloud.points.mean(axis=0)).max() < 1e-6
        assert np.max(np.linalg.norm(res.cloud.points, axis=1)) == pytest.approx(1.0, abs=1e-6)
        back = denormalize(res.cloud, res.center, res.scale)
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)

    def test_degenerate_cloud_flagged(self):
        res = normalize(PointCloud(np.ones((5, 3))))
        assert res.degenerate
        assert res.scale == 1.0
        np.testing.assert_allclose(res.cloud.points, 0.0)


class TestNearestNeighbors:
    def test_self_query(self):
        rng = np.random.default_rng(2)
        c = random_cloud(rng, 30)
        idx, d2 = nearest_neighbors(c, c, 1)
        assert np.array_equal(idx[:, 0], np.arange(30))
        np.testing.assert_allclose(d2, 0.0)

    def test_hand_case(self):
        q = PointCloud([[0.0, 0, 0]])
        r = PointCloud([[1.0, 0, 0], [0, 2.0, 0]])
        idx, d2 = nearest_neighbors(q, r, 2)
        assert idx.tolist() == [[0, 1]]
        np.testing.assert_allclose(d2, [[1.0, 4.0]])

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(3)
        q, r = random_cloud(rng, 128), random_cloud(rng, 128)
        idx, d2 = nearest_neighbors(q, r, 3)
        full = ((q.points[:, None, :] - r.points[None, :, :]) ** 2).sum(-1)
        ref = np.argsort(full, axis=1, kind="stable")[:, :3]
        assert np.array_equal(idx, ref)

    def test_k_too_large(self):
        rng = np.random.default_rng(4)
        c = random_cloud(rng, 5)
        with pytest.raises(ValueError):
            nearest_neighbors(c, c, 6)


class TestChamfer:
    def test_identity(self):
        rng = np.random.default_rng(5)
        c = random_cloud(rng, 20)
        assert chamfer_distance(c, c) == 0.0

    def test_hand_case(self):
        a = PointCloud([[0.0, 0, 0]])
        b = PointCloud([[1.0, 0, 0]])
        assert chamfer_distance(a, b) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            a, b = random_cloud(rng, 64), random_cloud(rng, 64)
            gamma = float(rng.uniform(0.2, 2.0))
            got = chamfer_distance(a, b, MetricConfig(gamma=gamma))
            assert got == pytest.approx(brute_chamfer(a.points, b.points, gamma), abs=1e-9)

    def test_symmetry_at_gamma_one(self):
        rng = np.random.default_rng(7)
        a, b = random_cloud(rng, 33), random_cloud(rng, 47)
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)

    def test_scale_covariance(self):
        rng = np.random.default_rng(8)
        a, b = random_cloud(rng, 24), random_cloud(rng, 24)
        s = 3.7
        base = chamfer_distance(a, b)
        scaled = chamfer_distance(
            PointCloud(a.points * s), PointCloud(b.points * s)
        )
        assert scaled == pytest.approx(s**2 * base, rel=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            assert chamfer_distance(random_cloud(rng, 8), random_cloud(rng, 12)) >= 0

    def test_gradient_matches_finite_differences(self):
        # autograd gradient of the training-path chamfer vs central
        # differences of the metric-path forward
        rng = np.random.default_rng(10)
        a = rng.normal(size=(12, 3))
        b = rng.normal(size=(12, 3))
        at = torch.tensor(a, requires_grad=True)
        loss = chamfer_loss(at, torch.tensor(b))
        loss.backward()
        grad = at.grad.numpy()
        h = 1e-5
        for i, j in itertools.product(range(3), range(3)):
            ap, am = a.copy(), a.copy()
            ap[i, j] += h
            am[i, j] -= h
            fd = (
                chamfer_distance(PointCloud(ap), PointCloud(b))
                - chamfer_distance(PointCloud(am), PointCloud(b))
            ) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestF1:
    def test_identity(self):
        rng = np.random.default_rng(11)
        c = random_cloud(rng, 30)
        assert f1_score(c, c) == 1.0

    def test_disjoint(self):
        a = PointCloud(np.zeros((4, 3)))
        b = PointCloud(np.ones((4, 3)))
        assert f1_score(a, b, MetricConfig(f1_threshold=0.01)) == 0.0

    def test_matches_brute_force_and_monotone(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            a, b = random_cloud(rng, 64), random_cloud(rng, 64)
            prev = -1.0
            for tau in (0.05, 0.2, 0.5, 1.0, 3.0):
                d2 = ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(-1)
                p = (d2.min(1) <= tau**2).mean()
                r = (d2.min(0) <= tau**2).mean()
                expected = 0.0 if p + r == 0 else 2 * p * r / (p + r)
                got = f1_score(a, b, MetricConfig(f1_threshold=tau))
                assert got == pytest.approx(expected, abs=1e-12)
                assert 0.0 <= got <= 1.0
                assert got >= prev
                prev = got


class TestEmd:
    def test_identity(self):
        rng = np.random.default_rng(13)
        c = random_cloud(rng, 16)
        assert emd_distance(c, c) == pytest.approx(0.0, abs=1e-12)

    def test_permutation_invariance(self):
        a = PointCloud([[0.0, 0, 0], [1.0, 0, 0]])
        b = PointCloud([[1.0, 0, 0], [0.0, 0, 0]])
        assert emd_distance(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_matches_exhaustive_matching(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            a, b = random_cloud(rng, n), random_cloud(rng, n)
            cost = np.linalg.norm(a.points[:, None, :] - b.points[None, :, :], axis=-1)
            best = min(
                cost[np.arange(n), list(perm)].mean()
                for perm in itertools.permutations(range(n))
            )
            assert emd_distance(a, b) == pytest.approx(best, abs=1e-12)

    def test_metric_properties(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            a, b, c = (random_cloud(rng, 24) for _ in range(3))
            dab, dba = emd_distance(a, b), emd_distance(b, a)
            assert dab == pytest.approx(dba, abs=1e-9)
            assert emd_distance(a, c) <= dab + emd_distance(b, c) + 1e-9

    def test_size_errors(self):
        rng = np.random.default_rng(16)
        with pytest.raises(ValueError):
            emd_distance(random_cloud(rng, 4), random_cloud(rng, 5))
        big = PointCloud(rng.normal(size=(513, 3)))
        with pytest.raises(ValueError):
            emd_distance(big, big)
