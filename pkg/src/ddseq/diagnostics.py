"""Spectral diagnostics for preconditioned operators.

Everything here is dense and intended for small verification problems,
not production runs.
"""

import numpy as np

__all__ = ["dense_matrix_from_action", "preconditioned_spectrum"]


def dense_matrix_from_action(apply_op, n):
    """Materialize a linear operator by applying it to unit vectors."""
    out = np.zeros((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        out[:, j] = apply_op(e)
        e[j] = 0.0
    return out


def preconditioned_spectrum(apply_A, apply_M, n):
    """Eigenvalues of the preconditioned operator, ascending.

    Uses the similarity transform with the operator square root, so the
    problem stays symmetric: eig(M^{-1} A) = eig(A^{1/2} M^{-1} A^{1/2}).
    Requires the operator to be symmetric positive definite.
    """
    A = dense_matrix_from_action(apply_A, n)
    A = 0.5 * (A + A.T)
    Minv = dense_matrix_from_action(apply_M, n)
    w, U = np.linalg.eigh(A)
    if w.min() <= 0.0:
        raise ValueError("operator is not positive definite")
    root = (U * np.sqrt(w)) @ U.T
    S = root @ Minv @ root
    return np.linalg.eigvalsh(0.5 * (S + S.T))
