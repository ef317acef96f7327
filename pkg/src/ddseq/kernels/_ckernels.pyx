# Compiled kernels: CSR matrix-vector products and banded Cholesky.
# A pure NumPy/LAPACK twin lives in pykernels.py; both must agree bit-for-bit
# on well-conditioned data up to the usual floating-point reordering caveats
# (the loops here fix the accumulation order left-to-right within a row).

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND_NAME = "compiled"


def csr_matvec(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
               double[::1] data, double[::1] x):
    """Return y = A x for A in CSR form, accumulating left-to-right per row."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        y[i] = acc
    return out


def band_cholesky(double[:, ::1] ab):
    """Factor an SPD band matrix in place, lower storage ab[i-j, j] = A[i, j].

    Returns 0 on success, or j+1 if pivot j is not positive (1-based, as
    LAPACK does).
    """
    cdef Py_ssize_t kd = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef Py_ssize_t j, i, k, m, lim
    cdef double piv, inv
    for j in range(n):
        piv = ab[0, j]
        if piv <= 0.0:
            return j + 1
        piv = sqrt(piv)
        ab[0, j] = piv
        inv = 1.0 / piv
        m = kd if j + kd < n else n - 1 - j
        for i in range(1, m + 1):
            ab[i, j] = ab[i, j] * inv
        # rank-1 update of the trailing band
        for k in range(1, m + 1):
            lim = m - k
            for i in range(lim + 1):
                ab[i, j + k] -= ab[i + k, j] * ab[k, j]
    return 0


def band_solve(double[:, ::1] ab, double[:, ::1] b):
    """Solve L L^T x = b for the factor produced by band_cholesky.

    b has shape (n, nrhs) and is overwritten with the solution.
    """
    cdef Py_ssize_t kd = ab.shape[0] - 1
    cdef Py_ssize_t n = ab.shape[1]
    cdef Py_ssize_t nrhs = b.shape[1]
    cdef Py_ssize_t j, i, r, m
    cdef double s
    for r in range(nrhs):
        for j in range(n):
            s = b[j, r] / ab[0, j]
            b[j, r] = s
            m = kd if j + kd < n else n - 1 - j
            for i in range(1, m + 1):
                b[j + i, r] -= ab[i, j] * s
        for j in range(n - 1, -1, -1):
            s = b[j, r]
            m = kd if j + kd < n else n - 1 - j
            for i in range(1, m + 1):
                s -= ab[i, j] * b[j + i, r]
            b[j, r] = s / ab[0, j]
    return 0
