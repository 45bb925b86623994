"""Dense/sparse linear algebra, PCA, and spectral norms.

Matrix convention: a dense matrix is a 2-D C-contiguous ``numpy.ndarray`` of
float64 (row-major). The JSON checkpoint fragment for a dense matrix is
``{"rows": n, "cols": m, "data": [row-major floats]}`` and is shared by every
model file in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError


def as_matrix(a) -> np.ndarray:
    """Coerce to a float64 2-D array, rejecting non-finite entries."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix contains non-finite entries")
    return m


def matrix_to_fragment(a: np.ndarray) -> dict:
    """Serialize a dense matrix to its JSON checkpoint fragment."""
    m = as_matrix(a)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel().tolist()}


def matrix_from_fragment(frag: dict) -> np.ndarray:
    """Rebuild a dense matrix from a JSON checkpoint fragment."""
    try:
        rows, cols, data = int(frag["rows"]), int(frag["cols"]), frag["data"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed matrix fragment: {exc}") from exc
    if rows < 0 or cols < 0 or len(data) != rows * cols:
        raise ValidationError(
            f"matrix fragment length {len(data)} does not match {rows}x{cols}"
        )
    return as_matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols))


@dataclass
class SparseMatrixCsr:
    """Square sparse matrix in compressed-sparse-row form."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.row_ptr.shape != (self.n + 1,):
            raise ValidationError("row_ptr must have length n+1")
        if np.any(np.diff(self.row_ptr) < 0) or self.row_ptr[0] != 0:
            raise ValidationError("row_ptr must be monotone nondecreasing from 0")
        if self.row_ptr[-1] != len(self.col_idx) or len(self.col_idx) != len(self.values):
            raise ValidationError("col_idx/values length must match row_ptr[-1]")
        if len(self.col_idx) and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n):
            raise ValidationError("col_idx out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("sparse values must be finite")

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrixCsr":
        c = sp.csr_array(m)
        c.sum_duplicates()
        if c.shape[0] != c.shape[1]:
            raise ValidationError("only square sparse matrices are supported")
        return cls(c.shape[0], c.indptr.astype(np.int64), c.indices.astype(np.int64),
                   c.data.astype(np.float64))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrixCsr":
        return cls.from_scipy(sp.eye_array(n, format="csr"))

    def to_scipy(self) -> sp.csr_array:
        return sp.csr_array((self.values, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.to_scipy().todense(), dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "row_ptr": self.row_ptr.tolist(),
            "col_idx": self.col_idx.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SparseMatrixCsr":
        try:
            return cls(int(d["n"]), d["row_ptr"], d["col_idx"], d["values"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed CSR payload: {exc}") from exc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product a @ b with dimension validation."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def spmm(s: SparseMatrixCsr, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product s @ x."""
    x = as_matrix(x)
    if s.n != x.shape[0]:
        raise ValidationError(f"spmm dimension mismatch: {s.n} vs {x.shape[0]} rows")
    return np.asarray(s.to_scipy() @ x, dtype=np.float64)


def spectral_norm(w: np.ndarray, max_iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value of w, by power iteration on the Gram map v -> WᵀWv."""
    w = as_matrix(w)
    if w.size == 0:
        raise ValidationError("spectral_norm of an empty matrix")
    # Deterministic start: ones vector biased by column norms so the iterate
    # is never orthogonal to the top singular direction in common cases.
    v = np.sqrt((w * w).sum(axis=0)) + 1.0
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        z = w.T @ (w @ v)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            # Iterate annihilated: either w = 0 or the start was orthogonal to
            # every nonzero singular direction. Fall back to basis vectors.
            restart = None
            for j in range(w.shape[1]):
                e = np.zeros(w.shape[1])
                e[j] = 1.0
                if np.linalg.norm(w.T @ (w @ e)) > 0.0:
                    restart = e
                    break
            if restart is None:
                return 0.0
            v = restart
            continue
        v_new = z / nz
        sigma_new = float(np.sqrt(nz))  # ||WᵀWv|| -> sigma² estimate for unit v
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            return float(np.linalg.norm(w @ v_new))
        sigma, v = sigma_new, v_new
    return float(np.linalg.norm(w @ v))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along an axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class PcaModel:
    """Principal component basis fitted to centered data.

    ``components`` has shape (k, d) with orthonormal rows; ``explained_variance``
    holds the corresponding covariance eigenvalues (ddof=1), nonincreasing.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": matrix_to_fragment(self.components),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PcaModel":
        try:
            return cls(
                mean=np.asarray(d["mean"], dtype=np.float64),
                components=matrix_from_fragment(d["components"]),
                explained_variance=np.asarray(d["explained_variance"], dtype=np.float64),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed PCA payload: {exc}") from exc


def _complete_direction(components: list[np.ndarray], d: int) -> np.ndarray:
    # Deterministic orthonormal filler for rank-deficient data: Gram-Schmidt
    # a standard basis vector against the components found so far.
    for j in range(d):
        v = np.zeros(d)
        v[j] = 1.0
        for c in components:
            v -= (v @ c) * c
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            return v / nv
    raise ValidationError("could not complete an orthonormal basis")


def pca_fit(x: np.ndarray, k: int, max_iters: int = 1000, tol: float = 1e-9) -> PcaModel:
    """Top-k principal directions via power iteration with Hotelling deflation.

    Works on the implicit covariance map v -> Xcᵀ(Xc v)/(n-1), so the d×d
    covariance matrix is never materialized.
    """
    x = as_matrix(x)
    n, d = x.shape
    if n < 2:
        raise ValidationError(f"pca_fit needs at least 2 rows, got {n}")
    if not (1 <= k <= min(n, d)):
        raise ValidationError(f"pca_fit k={k} out of range for {n}x{d} data")
    mean = x.mean(axis=0)
    xc = x - mean
    denom = n - 1

    components: list[np.ndarray] = []
    variances: list[float] = []
    for comp_index in range(k):
        v = np.ones(d) / np.sqrt(d)
        # Start orthogonal to what we already found.
        for c in components:
            v -= (v @ c) * c
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            v = _complete_direction(components, d)
        else:
            v /= nv
        lam = 0.0
        for _ in range(max_iters):
            z = xc.T @ (xc @ v) / denom
            for c, lc in zip(components, variances):  # Hotelling deflation
                z -= lc * (v @ c) * c
            # Re-orthogonalize to control floating-point drift.
            for c in components:
                z -= (z @ c) * c
            nz = np.linalg.norm(z)
            if nz < 1e-14:
                lam = 0.0
                v = _complete_direction(components, d)
                break
            lam_new = float(v @ z)
            v = z / nz
            if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
                lam = lam_new
                break
            lam = lam_new
        # Sign convention: largest-magnitude entry is positive.
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        components.append(v)
        variances.append(max(lam, 0.0))

    order = np.argsort(-np.asarray(variances), kind="stable")
    comp = np.vstack([components[i] for i in order])
    ev = np.asarray([variances[i] for i in order], dtype=np.float64)
    return PcaModel(mean=mean, components=comp, explained_variance=ev)


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project rows of x onto the fitted basis: (x - mean) @ componentsᵀ."""
    x = as_matrix(x)
    if x.shape[1] != model.mean.shape[0]:
        raise ValidationError(
            f"pca_transform dimension mismatch: {x.shape[1]} vs {model.mean.shape[0]}"
        )
    return (x - model.mean) @ model.components.T
