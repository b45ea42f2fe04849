import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedsb import linalg
from fedsb.oracles import lapack_truncation, naive_matmul

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_dim=8):
    shapes = st.tuples(st.integers(1, max_dim), st.integers(1, max_dim))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_matmul_examples():
    m = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(linalg.matmul(np.eye(3), m), m)
    assert np.array_equal(linalg.matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_against_triple_loop(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(linalg.matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(linalg.ShapeError):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(st.integers(0, 2**31))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal((3, 6))
    left = linalg.matmul(linalg.matmul(a, b), c)
    right = linalg.matmul(a, linalg.matmul(b, c))
    assert linalg.frobenius_norm(left - right) <= 1e-10 * linalg.frobenius_norm(left)


def test_frobenius_examples():
    assert linalg.frobenius_norm(np.zeros((2, 2))) == 0
    assert linalg.frobenius_norm(np.eye(3)) == pytest.approx(np.sqrt(3), abs=1e-15)
    assert linalg.frobenius_norm([[3.0, 4.0]]) == 5.0


def test_gaussian_matrix():
    assert np.array_equal(linalg.gaussian_matrix(3, 4, 0.0, 1), np.zeros((3, 4)))
    assert np.array_equal(linalg.gaussian_matrix(3, 4, 1.0, 7), linalg.gaussian_matrix(3, 4, 1.0, 7))
    z = linalg.gaussian_matrix(200, 200, 1.0, 0)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05
    with pytest.raises(ValueError):
        linalg.gaussian_matrix(2, 2, -1.0, 0)


def test_svd_examples():
    svd = linalg.truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
    np.testing.assert_allclose(svd.S, [3.0, 2.0], atol=1e-14)
    svd = linalg.truncated_svd(np.eye(4), 4)
    np.testing.assert_allclose(svd.S, np.ones(4), atol=1e-14)
    np.testing.assert_allclose(svd.reconstruct(), np.eye(4), atol=1e-14)


def test_svd_truncation_matches_independent_svd(rng):
    m = rng.standard_normal((6, 4))
    mine = linalg.frobenius_norm(m - linalg.truncated_svd(m, 2).reconstruct())
    ref = linalg.frobenius_norm(m - lapack_truncation(m, 2))
    assert abs(mine - ref) < 1e-8


@given(matrices())
def test_svd_invariants(m):
    k = min(m.shape)
    svd = linalg.full_svd(m)
    assert svd.U.shape == (m.shape[0], k) and svd.V.shape == (m.shape[1], k)
    assert np.linalg.norm(svd.U.T @ svd.U - np.eye(k)) < 1e-10
    assert np.linalg.norm(svd.V.T @ svd.V - np.eye(k)) < 1e-10
    assert np.all(svd.S >= 0) and np.all(np.diff(svd.S) <= 0)
    scale = max(1.0, np.abs(m).max())
    assert np.max(np.abs(svd.reconstruct() - m)) < 1e-10 * scale
    np.testing.assert_allclose(svd.S, np.linalg.svd(m, compute_uv=False), atol=1e-10 * scale)
    # sign convention
    idx = np.argmax(np.abs(svd.U), axis=0)
    assert np.all(svd.U[idx, np.arange(k)] >= 0)


@given(matrices(), st.data())
def test_eckart_young(m, data):
    r = data.draw(st.integers(1, min(m.shape)))
    mine = linalg.frobenius_norm(m - linalg.truncated_svd(m, r).reconstruct())
    ref = linalg.frobenius_norm(m - lapack_truncation(m, r))
    assert mine <= ref + 1e-8 * max(1.0, np.abs(m).max())


def test_svd_rank_deficient_completes_basis(rng):
    m = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    svd = linalg.full_svd(m)
    assert np.linalg.norm(svd.U.T @ svd.U - np.eye(5)) < 1e-10
    assert np.all(svd.S[2:] == 0)
    np.testing.assert_allclose(svd.reconstruct(), m, atol=1e-12)
    z = linalg.full_svd(np.zeros((3, 2)))
    assert np.all(z.S == 0)
    assert np.linalg.norm(z.U.T @ z.U - np.eye(2)) < 1e-12


def test_svd_errors():
    with pytest.raises(ValueError):
        linalg.truncated_svd(np.eye(3), 0)
    with pytest.raises(ValueError):
        linalg.truncated_svd(np.eye(3), 4)
    bad = np.eye(3)
    bad[0, 1] = np.nan
    with pytest.raises(ValueError):
        linalg.truncated_svd(bad, 1)
    with pytest.raises(linalg.ShapeError):
        linalg.full_svd(np.ones(3))


def test_svd_deterministic(rng):
    m = rng.standard_normal((7, 5))
    a, b = linalg.full_svd(m), linalg.full_svd(m)
    assert a.U.tobytes() == b.U.tobytes() and a.S.tobytes() == b.S.tobytes()
