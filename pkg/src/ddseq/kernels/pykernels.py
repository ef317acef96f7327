"""Fallback kernels built on NumPy, SciPy sparse and LAPACK.

Mirrors the interface of the compiled extension so either backend can be
swapped in at import time.
"""

import numpy as np
import scipy.sparse as sp
from scipy.linalg.lapack import dpbtrf, dpbtrs

BACKEND_NAME = "python"


def csr_matvec(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    mat = sp.csr_matrix((data, indices, indptr), shape=(n, x.shape[0]), copy=False)
    return mat.dot(x)


def band_cholesky(ab):
    """Factor an SPD band matrix in place, lower storage ab[i-j, j] = A[i, j].

    Returns 0 on success or the 1-based index of a non-positive pivot.
    """
    n = ab.shape[1]
    if n == 0:
        return 0
    c, info = dpbtrf(ab, lower=1)
    if info > 0:
        return info
    if info < 0:
        raise ValueError(f"illegal argument {-info} passed to dpbtrf")
    ab[...] = c
    return 0


def band_solve(ab, b):
    """Solve L L^T x = b in place for a band_cholesky factor; b is (n, nrhs)."""
    if ab.shape[1] == 0:
        return 0
    x, info = dpbtrs(ab, b, lower=1)
    if info != 0:
        raise ValueError(f"illegal argument {-info} passed to dpbtrs")
    b[...] = x
    return 0
