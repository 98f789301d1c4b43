import numpy as np
import pytest
from hypothesis import given, strategies as st

from specflow.linalg import DimensionError, EigenConvergenceError, NotSymmetricError, matmul, sym_eigen


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for r in range(a.shape[1]):
                out[i, j] += a[i, r] * b[r, j]
    return out


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_nonfinite():
    with pytest.raises(ValueError):
        matmul([[np.nan]], [[1.0]])


def test_eigen_diagonal():
    vals, vecs = sym_eigen(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(vals, [3.0, 2.0, 1.0])
    np.testing.assert_allclose(np.abs(vecs), np.eye(3)[:, [0, 2, 1]])


def test_eigen_textbook_2x2():
    vals, vecs = sym_eigen([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-14)
    r = 1 / np.sqrt(2)
    np.testing.assert_allclose(vecs[:, 0], [r, r], atol=1e-14)
    # sign convention: largest-magnitude entry positive (ties resolve to the first)
    np.testing.assert_allclose(vecs[:, 1], [r, -r], atol=1e-14)


def test_eigen_random_spd_reconstruction():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(10, 10))
    s = m @ m.T + 10 * np.eye(10)
    vals, vecs = sym_eigen(s)
    assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - s)) < 1e-7


def test_eigen_agrees_with_lapack():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(33, 33))
    s = (m + m.T) / 2
    vals, _ = sym_eigen(s)
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(s)[::-1], atol=1e-10)


def test_eigen_sign_convention():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(8, 8))
    _, vecs = sym_eigen(m + m.T)
    idx = np.argmax(np.abs(vecs), axis=0)
    assert np.all(vecs[idx, np.arange(8)] > 0)


def test_eigen_rejects_nonsymmetric():
    with pytest.raises(NotSymmetricError):
        sym_eigen([[1.0, 2.0], [0.0, 1.0]])


def test_eigen_rejects_nonsquare():
    with pytest.raises(DimensionError):
        sym_eigen(np.ones((2, 3)))


def test_eigen_sweep_cap():
    rng = np.random.default_rng(6)
    m = rng.normal(size=(6, 6))
    with pytest.raises(EigenConvergenceError):
        sym_eigen(m + m.T, max_sweeps=1)


def test_eigen_one_by_one_and_empty():
    vals, vecs = sym_eigen([[-2.5]])
    assert vals.tolist() == [-2.5] and vecs.tolist() == [[1.0]]
    vals, vecs = sym_eigen(np.zeros((0, 0)))
    assert vals.shape == (0,)


@given(n=st.integers(1, 12), seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_eigen_properties(n, seed, scale):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n)) * scale
    s = (m + m.T) / 2
    vals, vecs = sym_eigen(s)
    norm_inf = np.max(np.abs(s))
    assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - s)) < 1e-7 * (1 + norm_inf)
    assert np.max(np.abs(vecs.T @ vecs - np.eye(n))) < 1e-7
    assert abs(np.trace(s) - vals.sum()) < 1e-7 * (1 + abs(np.trace(s)))
    assert np.all(np.diff(vals) <= 0)
    # residual check per eigenpair
    assert np.max(np.abs(s @ vecs - vecs * vals)) < 1e-7 * max(1.0, np.linalg.norm(s))
