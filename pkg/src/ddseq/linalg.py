"""Sparse and dense linear algebra used by the solver stack.

The sparse type is a thin CSR container with validated structure.  SPD
systems are factored once and solved many times, so the factorization
applies a fill-reducing (reverse Cuthill-McKee) permutation and stores a
banded Cholesky factor of the permuted matrix; the band kernels come from
the compiled extension when available.  Dense symmetric-definite pencils
are handed to LAPACK through SciPy.
"""

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import kernels
from .errors import ContractError, NotSpdError, PencilNotDefiniteError

__all__ = [
    "SparseMatrix",
    "SpdFactorization",
    "spmv",
    "factorize_spd",
    "solve_factored",
    "generalized_sym_eig",
    "default_pencil_shift",
    "read_matrix_market",
    "write_matrix_market",
]


class SparseMatrix:
    """Square-or-rectangular sparse matrix in CSR form.

    Parameters
    ----------
    n_rows, n_cols : int
    row_offsets : (n_rows + 1,) int64 array, non-decreasing
    col_indices : int64 array, strictly increasing within each row
    values : float64 array, same length as col_indices
    """

    __slots__ = ("n_rows", "n_cols", "row_offsets", "col_indices", "values")

    def __init__(self, n_rows, n_cols, row_offsets, col_indices, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self._validate()

    def _validate(self):
        if self.row_offsets.shape != (self.n_rows + 1,):
            raise ContractError("row_offsets must have length n_rows + 1")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.values):
            raise ContractError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ContractError("row_offsets must be non-decreasing")
        if len(self.col_indices) != len(self.values):
            raise ContractError("col_indices and values must have equal length")
        if self.col_indices.size:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols:
                raise ContractError("column index out of range")
        for i in range(self.n_rows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            if hi - lo > 1 and np.any(np.diff(self.col_indices[lo:hi]) <= 0):
                raise ContractError(f"row {i} has unsorted or duplicate columns")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.values)

    @classmethod
    def from_scipy(cls, mat):
        csr = sp.csr_matrix(mat)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, arr, drop_tol=0.0):
        arr = np.asarray(arr, dtype=np.float64)
        mask = np.abs(arr) > drop_tol
        return cls.from_scipy(sp.csr_matrix(np.where(mask, arr, 0.0)))

    def to_scipy(self):
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.n_rows, self.n_cols),
        )

    def to_dense(self):
        return self.to_scipy().toarray()

    def transpose(self):
        return SparseMatrix.from_scipy(self.to_scipy().T.tocsr())

    def diagonal(self):
        return self.to_scipy().diagonal()

    def matvec(self, x):
        return spmv(self, x)


def spmv(A, x):
    """Matrix-vector product y = A x.

    Accumulation within each row runs left to right so results are
    reproducible across runs for a fixed backend.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (A.n_cols,):
        raise ContractError(f"x has shape {x.shape}, expected ({A.n_cols},)")
    return kernels.csr_matvec(A.row_offsets, A.col_indices, A.values, x)


class SpdFactorization:
    """Cholesky factorization of an SPD sparse matrix.

    Holds the banded factor of P A P^T, where P is a reverse Cuthill-McKee
    permutation chosen to keep the band thin.
    """

    __slots__ = ("order", "band", "perm", "_iperm")

    def __init__(self, order, band, perm):
        self.order = order
        self.band = band
        self.perm = perm
        self._iperm = np.empty_like(perm)
        self._iperm[perm] = np.arange(order, dtype=perm.dtype)

    def solve(self, b):
        return solve_factored(self, b)


def factorize_spd(A):
    """Factor an SPD matrix for repeated solves.

    Raises
    ------
    NotSpdError
        If a non-positive pivot shows up; the pivot index refers to the
        original ordering.
    ContractError
        If the matrix is not square or visibly unsymmetric.
    """
    if A.n_rows != A.n_cols:
        raise ContractError("factorize_spd needs a square matrix")
    n = A.n_rows
    if n == 0:
        return SpdFactorization(
            0,
            np.zeros((1, 0), dtype=np.float64),
            np.zeros(0, dtype=np.int64),
        )
    mat = A.to_scipy()
    scale = np.abs(mat.data).max() if mat.nnz else 0.0
    asym = abs(mat - mat.T)
    if asym.nnz and asym.data.max() > 1e-12 * max(scale, 1.0):
        raise ContractError("factorize_spd needs a symmetric matrix")

    perm = np.asarray(
        reverse_cuthill_mckee(mat, symmetric_mode=True), dtype=np.int64
    )
    pmat = mat[perm][:, perm].tocoo()
    if pmat.nnz:
        kd = int(np.abs(pmat.row - pmat.col).max())
    else:
        kd = 0
    band = np.zeros((kd + 1, n), dtype=np.float64)
    lower = pmat.row >= pmat.col
    band[pmat.row[lower] - pmat.col[lower], pmat.col[lower]] = pmat.data[lower]

    info = kernels.band_cholesky(band)
    if info > 0:
        raise NotSpdError(perm[info - 1])
    return SpdFactorization(n, band, perm)


def solve_factored(fact, b):
    """Solve A x = b given factorize_spd(A); b may be a vector or a matrix
    of stacked right-hand sides (one per column)."""
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    if single:
        b = b[:, None]
    if b.shape[0] != fact.order:
        raise ContractError(
            f"rhs has leading dimension {b.shape[0]}, expected {fact.order}"
        )
    if fact.order == 0:
        out = np.zeros_like(b)
        return out[:, 0] if single else out
    work = np.ascontiguousarray(b[fact.perm])
    kernels.band_solve(fact.band, work)
    out = np.empty_like(work)
    out[fact.perm] = work
    return out[:, 0] if single else out


def default_pencil_shift(B):
    """Regularization shift for a possibly singular pencil right side."""
    n = B.shape[0]
    if n == 0:
        return 0.0
    return 1e-10 * float(np.trace(B)) / n


def generalized_sym_eig(A, B, shift=0.0):
    """Solve the symmetric generalized problem A v = lambda (B + shift I) v.

    Returns eigenvalues in descending order and eigenvectors as columns,
    orthonormal in the (shifted) B inner product.

    Raises
    ------
    PencilNotDefiniteError
        If B + shift I is not positive definite.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("pencil matrices must be square and equally sized")
    Bs = B if shift == 0.0 else B + shift * np.eye(B.shape[0])
    try:
        vals, vecs = scipy.linalg.eigh(A, Bs)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise PencilNotDefiniteError(
            f"pencil not definite (shift={shift:g}): {exc}"
        ) from exc
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def write_matrix_market(A, path, comment=""):
    """Write a SparseMatrix to a Matrix Market coordinate file.

    Symmetric matrices are stored with the lower triangle only; indices in
    the file are 1-based per the format.  Values keep full precision so a
    write-read round trip is exact.
    """
    mat = A.to_scipy()
    symmetric = False
    if A.n_rows == A.n_cols:
        d = abs(mat - mat.T)
        symmetric = d.nnz == 0
    scipy.io.mmwrite(
        str(path),
        mat,
        comment=comment,
        precision=17,
        symmetry="symmetric" if symmetric else "general",
    )


def read_matrix_market(path):
    """Read a Matrix Market coordinate file into a SparseMatrix."""
    mat = scipy.io.mmread(str(path))
    return SparseMatrix.from_scipy(mat)
