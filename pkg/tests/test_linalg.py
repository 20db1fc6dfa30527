import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedfoa.linalg import (
    LinalgError,
    frobenius_distance,
    orthogonality_error,
    procrustes_align,
    qr_decompose,
    thin_svd,
)
from oracles import best_random_residual, frobenius_by_summation, gram_schmidt, random_orthonormal_columns


def test_qr_identity():
    q, r = qr_decompose(np.eye(4))
    assert np.array_equal(q, np.eye(4))
    assert np.array_equal(r, np.eye(4))


def test_qr_worked_example_matches_gram_schmidt():
    z = np.array([[3.0, 1.0], [4.0, 2.0]])
    q_gs, r_gs = gram_schmidt(z)
    np.testing.assert_allclose(r_gs, [[5.0, 2.2], [0.0, 0.4]], atol=1e-12)
    q, r = qr_decompose(z)
    np.testing.assert_allclose(q, [[0.6, -0.8], [0.8, 0.6]], atol=1e-12)
    np.testing.assert_allclose(r, r_gs, atol=1e-12)
    np.testing.assert_allclose(q, q_gs, atol=1e-12)


def test_qr_rank_deficient_has_zero_second_pivot():
    z = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    _, r_gs = gram_schmidt(z)
    assert r_gs[1, 1] == 0.0
    q, r = qr_decompose(z)
    assert abs(r[1, 1]) < 1e-12
    assert r[1, 1] >= 0
    np.testing.assert_allclose(q @ r, z, atol=1e-12)


def test_qr_zero_matrix_is_not_an_error():
    q, r = qr_decompose(np.zeros((5, 3)))
    assert np.all(r == 0)
    assert orthogonality_error(q) < 1e-12


def test_qr_rejects_wide_and_nonfinite():
    with pytest.raises(LinalgError):
        qr_decompose(np.ones((2, 3)))
    with pytest.raises(LinalgError):
        qr_decompose([[1.0, np.nan], [0.0, 1.0]])


def test_qr_is_bitwise_deterministic():
    z = np.random.default_rng(3).normal(size=(40, 7))
    a, b = qr_decompose(z), qr_decompose(z.copy())
    assert a.q.tobytes() == b.q.tobytes()
    assert a.r.tobytes() == b.r.tobytes()


@settings(max_examples=60, deadline=None)
@given(m=st.integers(2, 40), n=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_qr_invariants(m, n, seed):
    n = min(n, m)
    z = np.random.default_rng(seed).normal(size=(m, n))
    q, r = qr_decompose(z)
    assert q.shape == (m, n) and r.shape == (n, n)
    assert orthogonality_error(q) <= 1e-8
    assert np.all(np.tril(r, -1) == 0)
    assert np.all(np.diag(r) >= 0)
    assert np.linalg.norm(q @ r - z) <= 1e-8 * np.linalg.norm(z)
    _, r_np = np.linalg.qr(z)
    np.testing.assert_allclose(r, r_np * np.sign(np.diag(r_np))[:, None], atol=1e-9)


def test_qr_positive_column_scaling():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(12, 4))
    q, r = qr_decompose(z)
    scaled = z.copy()
    scaled[:, 2] *= 3.5
    q2, r2 = qr_decompose(scaled)
    np.testing.assert_allclose(q2, q, atol=1e-10)
    expected = r.copy()
    expected[:, 2] *= 3.5
    np.testing.assert_allclose(r2, expected, atol=1e-10)
    np.testing.assert_allclose(q2 @ r2, scaled, atol=1e-10)


def test_svd_diagonal():
    u, s, v = thin_svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(s, [3.0, 1.0])
    np.testing.assert_allclose(np.abs(u), np.eye(2), atol=1e-14)
    np.testing.assert_allclose(np.abs(v), np.eye(2), atol=1e-14)


def test_svd_zero_matrix_gives_orthonormal_factors():
    u, s, v = thin_svd(np.zeros((2, 3)))
    np.testing.assert_array_equal(s, [0.0, 0.0])
    assert u.shape == (2, 2) and v.shape == (3, 2)
    assert orthogonality_error(u) < 1e-12
    assert orthogonality_error(v) < 1e-12


@settings(max_examples=60, deadline=None)
@given(p=st.integers(1, 20), q=st.integers(1, 20), seed=st.integers(0, 2**31))
def test_svd_invariants(p, q, seed):
    a = np.random.default_rng(seed).normal(size=(p, q))
    u, s, v = thin_svd(a)
    k = min(p, q)
    assert u.shape == (p, k) and s.shape == (k,) and v.shape == (q, k)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert np.linalg.norm(u * s @ v.T - a) <= 1e-7 * np.linalg.norm(a)
    assert orthogonality_error(u) <= 1e-7
    assert orthogonality_error(v) <= 1e-7
    np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), rtol=1e-9, atol=1e-12)


def test_svd_rank_deficient_completes_basis():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    u, s, v = thin_svd(a)
    assert np.count_nonzero(s) == 2
    assert orthogonality_error(u) < 1e-7
    np.testing.assert_allclose(u * s @ v.T, a, atol=1e-10)


def test_procrustes_exact_recreation():
    rng = np.random.default_rng(2)
    q0 = random_orthonormal_columns(rng, 1, 10, 3)[0]
    r = np.triu(rng.normal(size=(3, 3))) + 3 * np.eye(3)
    z = q0 @ r
    q_star, residual = procrustes_align(z, r)
    assert residual < 1e-10
    np.testing.assert_allclose(q_star @ r, z, atol=1e-10)


def test_procrustes_zero_target():
    z = np.random.default_rng(4).normal(size=(8, 3))
    q_star, residual = procrustes_align(z, np.zeros((3, 3)))
    assert residual == pytest.approx(np.linalg.norm(z), rel=1e-12)
    assert orthogonality_error(q_star) < 1e-8


def test_procrustes_beats_random_search():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(16, 4))
    r = rng.normal(size=(4, 4))
    q_star, residual = procrustes_align(z, r)
    assert orthogonality_error(q_star) <= 1e-8
    cands = random_orthonormal_columns(rng, 10_000, 16, 4)
    assert residual <= best_random_residual(z, r, cands) + 1e-9
    # Trace form: the optimum maximizes Tr(R Z^T Q) over orthonormal-column Q.
    best_trace = np.trace(r @ z.T @ q_star)
    traces = np.einsum("ij,kji->k", r @ z.T, cands)
    assert np.all(traces <= best_trace + 1e-9)


def test_procrustes_shape_errors():
    with pytest.raises(LinalgError):
        procrustes_align(np.ones((3, 4)), np.eye(4))
    with pytest.raises(LinalgError):
        procrustes_align(np.ones((6, 4)), np.eye(3))


def test_frobenius_distance():
    a = np.random.default_rng(0).normal(size=(3, 5))
    assert frobenius_distance(a, a) == 0.0
    assert frobenius_distance(np.eye(2), np.zeros((2, 2))) == pytest.approx(np.sqrt(2))
    b = np.random.default_rng(1).normal(size=(3, 5))
    assert frobenius_distance(a, b) == pytest.approx(frobenius_by_summation(a, b), rel=1e-12)
    assert frobenius_distance(a, b) == frobenius_distance(b, a)
    with pytest.raises(LinalgError):
        frobenius_distance(a, b.T)
