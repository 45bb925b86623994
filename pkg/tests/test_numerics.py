import numpy as np
import pytest
import scipy.sparse as sp
import scipy.special

from lyapctl.errors import ValidationError
from lyapctl.numerics import (
    SparseMatrixCsr,
    as_matrix,
    matmul,
    matrix_from_fragment,
    matrix_to_fragment,
    pca_fit,
    pca_transform,
    softmax,
    spectral_norm,
    spmm,
)


def test_as_matrix_accepts_2d_floats():
    m = as_matrix([[1, 2], [3, 4]])
    assert m.dtype == np.float64
    assert m.shape == (2, 2)


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ValidationError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ValidationError):
        as_matrix([[1.0, np.nan]])


def test_matrix_fragment_round_trip():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 7))
    b = matrix_from_fragment(matrix_to_fragment(a))
    np.testing.assert_array_equal(a, b)


def test_csr_matches_scipy_dense():
    rng = np.random.default_rng(11)
    dense = (rng.random((8, 8)) < 0.3).astype(float)
    s = SparseMatrixCsr.from_scipy(sp.csr_array(dense))
    np.testing.assert_array_equal(s.to_dense(), dense)
    np.testing.assert_array_equal(s.to_scipy().toarray(), dense)


def test_csr_json_round_trip():
    rng = np.random.default_rng(5)
    dense = (rng.random((9, 9)) < 0.4) * rng.normal(size=(9, 9))
    s = SparseMatrixCsr.from_scipy(sp.csr_array(dense))
    t = SparseMatrixCsr.from_json(s.to_json())
    np.testing.assert_array_equal(s.to_dense(), t.to_dense())
    assert t.n == 9


def test_csr_rejects_non_square():
    with pytest.raises(ValidationError):
        SparseMatrixCsr.from_scipy(sp.csr_array(np.ones((2, 3))))


def test_csr_identity():
    s = SparseMatrixCsr.identity(5)
    np.testing.assert_array_equal(s.to_dense(), np.eye(5))


def test_spmm_matches_dense():
    rng = np.random.default_rng(7)
    dense = (rng.random((10, 10)) < 0.3) * rng.normal(size=(10, 10))
    x = rng.normal(size=(10, 4))
    s = SparseMatrixCsr.from_scipy(sp.csr_array(dense))
    np.testing.assert_allclose(spmm(s, x), dense @ x, rtol=1e-12, atol=1e-12)


def test_matmul_matches_numpy():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-13)


def test_spectral_norm_random_matrices():
    rng = np.random.default_rng(17)
    for _ in range(10):
        w = rng.normal(size=rng.integers(2, 9, size=2))
        np.testing.assert_allclose(spectral_norm(w), np.linalg.norm(w, 2),
                                   rtol=1e-8, atol=1e-10)


def test_spectral_norm_zero_and_degenerate():
    assert spectral_norm(np.zeros((4, 3))) == 0.0
    # power iteration from a vector in the null space must still converge
    w = np.zeros((3, 3))
    w[1, 2] = 2.5
    np.testing.assert_allclose(spectral_norm(w), 2.5, rtol=1e-9)


def test_softmax_matches_scipy():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(6, 4)) * 10
    np.testing.assert_allclose(softmax(x), scipy.special.softmax(x, axis=-1),
                               rtol=1e-12, atol=1e-15)


def test_softmax_extreme_logits_stable():
    x = np.array([[1000.0, 0.0, -1000.0]])
    p = softmax(x)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)
    assert p[0, 0] > 0.999


def _eigh_pca(x, k):
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return vals[order][:k], vecs[:, order][:, :k].T


def test_pca_matches_eigendecomposition():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(60, 8)) @ np.diag([5, 3, 2, 1, 0.5, 0.3, 0.2, 0.1])
    model = pca_fit(x, 4)
    vals, vecs = _eigh_pca(x, 4)
    np.testing.assert_allclose(model.explained_variance, vals, rtol=1e-6)
    # eigenvectors match up to sign; the sign convention fixes orientation
    for row, ref in zip(model.components, vecs):
        dot = abs(float(row @ ref))
        np.testing.assert_allclose(dot, 1.0, atol=1e-6)


def test_pca_components_orthonormal_and_sign_fixed():
    rng = np.random.default_rng(29)
    x = rng.normal(size=(40, 6))
    model = pca_fit(x, 6)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(6),
                               atol=1e-8)
    for row in model.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_transform_centers_and_projects():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(30, 5)) + 7.0
    model = pca_fit(x, 3)
    z = pca_transform(model, x)
    assert z.shape == (30, 3)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z, (x - model.mean) @ model.components.T,
                               rtol=1e-12, atol=1e-12)


def test_pca_reconstruction_error_near_optimal():
    rng = np.random.default_rng(37)
    x = rng.normal(size=(50, 7)) * np.linspace(3, 0.2, 7)
    k = 3
    model = pca_fit(x, k)
    z = pca_transform(model, x)
    recon = z @ model.components + model.mean
    err = np.linalg.norm(x - recon) ** 2
    vals, _ = _eigh_pca(x, 7)
    best = vals[k:].sum() * (len(x) - 1)
    np.testing.assert_allclose(err, best, rtol=1e-6)


def test_pca_json_round_trip():
    rng = np.random.default_rng(41)
    model = pca_fit(rng.normal(size=(20, 4)), 2)
    from lyapctl.numerics import PcaModel

    back = PcaModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.mean, model.mean)
    np.testing.assert_array_equal(back.components, model.components)
    np.testing.assert_array_equal(back.explained_variance, model.explained_variance)
