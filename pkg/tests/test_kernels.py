import numpy as np
import pytest

from pcdistill import _kernels_py, kernels

IMPLS = [_kernels_py]
try:
    from pcdistill import _kernels

    IMPLS.append(_kernels)
except ImportError:
    _kernels = None


def brute_knn(q, r, k):
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, d2[np.arange(len(q))[:, None], order]


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.split(".")[-1])
class TestImpls:
    def test_nn1_matches_brute(self, impl):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = rng.normal(size=(rng.integers(1, 40), 3))
            r = rng.normal(size=(rng.integers(1, 40), 3))
            idx, d2 = impl.nn1(np.ascontiguousarray(q), np.ascontiguousarray(r))
            ref_idx, ref_d2 = brute_knn(q, r, 1)
            assert np.array_equal(idx, ref_idx[:, 0])
            np.testing.assert_allclose(d2, ref_d2[:, 0], rtol=0, atol=1e-12)

    def test_knn_matches_brute(self, impl):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = rng.normal(size=(rng.integers(4, 50), 3))
            q = rng.normal(size=(rng.integers(1, 50), 3))
            k = int(rng.integers(1, len(r) + 1))
            idx, d2 = impl.knn(np.ascontiguousarray(q), np.ascontiguousarray(r), k)
            ref_idx, ref_d2 = brute_knn(q, r, k)
            assert np.array_equal(idx, ref_idx)
            np.testing.assert_allclose(d2, ref_d2, rtol=0, atol=1e-12)

    def test_knn_tie_break_lowest_index(self, impl):
        # duplicated reference points force exact distance ties
        r = np.ascontiguousarray(
            [[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0], [0, 1.0, 0]], dtype=np.float64
        )
        q = np.zeros((1, 3))
        idx, d2 = impl.knn(q, r, 4)
        assert idx.tolist() == [[0, 1, 2, 3]]
        assert np.allclose(d2, 1.0)

    def test_knn_rejects_oversized_k(self, impl):
        q = np.zeros((2, 3))
        with pytest.raises(ValueError):
            impl.knn(q, q, 3)

    def test_chamfer_sums(self, impl):
        rng = np.random.default_rng(2)
        a = np.ascontiguousarray(rng.normal(size=(30, 3)))
        b = np.ascontiguousarray(rng.normal(size=(20, 3)))
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        s_ab, s_ba = impl.chamfer_sums(a, b)
        assert abs(s_ab - d2.min(1).sum()) < 1e-10
        assert abs(s_ba - d2.min(0).sum()) < 1e-10


@pytest.mark.skipif(_kernels is None, reason="compiled extension not built")
def test_compiled_and_fallback_agree():
    rng = np.random.default_rng(3)
    q = np.ascontiguousarray(rng.normal(size=(64, 3)))
    r = np.ascontiguousarray(rng.normal(size=(48, 3)))
    i1, d1 = _kernels.knn(q, r, 5)
    i2, d2 = _kernels_py.knn(q, r, 5)
    assert np.array_equal(i1, i2)
    np.testing.assert_allclose(d1, d2, rtol=0, atol=1e-14)


def test_dispatch_exports():
    assert callable(kernels.nn1) and callable(kernels.knn) and callable(kernels.chamfer_sums)
