"""Preconditioned CG with deflation and basis recycling across a sequence.

The deflated solver keeps a basis W of up to ``limit`` vectors.  Every
iteration projects the new search direction A-orthogonally to W, and the
initial guess is corrected so the initial residual is orthogonal to W.
Residuals are additionally re-orthogonalized against W each iteration to
fight floating-point drift.

Basis update strategies between systems:

- ``none``  keep the basis empty (plain PCG),
- ``b1``    store the first ``limit`` search directions, then freeze,
- ``b2``    sliding window over the most recent ``limit`` directions,
- ``b3``    harmonic Ritz vectors for the smallest Ritz values,
- ``b4``    harmonic Ritz vectors for the largest Ritz values.

For b1/b2 the Gram matrix W^T A W is diagonal (search directions are
mutually A-orthogonal) and is stored as a vector.  For b3/b4 it is a full
matrix kept in factored form.  b3/b4 track their Ritz values across
systems and freeze the basis once the values stagnate.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ContractError, PencilNotDefiniteError
from .linalg import default_pencil_shift, generalized_sym_eig

__all__ = [
    "StoppingRule",
    "SolveReport",
    "DeflationState",
    "check_stop",
    "pcg",
    "project_initial",
    "deflated_pcg",
    "update_basis",
    "harmonic_ritz",
    "ritz_converged",
    "write_residual_csv",
    "write_ritz_csv",
]

STRATEGIES = ("none", "b1", "b2", "b3", "b4")
RITZ_TOL = 1e-5


@dataclass
class StoppingRule:
    """Relative residual stopping test.

    kind is ``relative_to_rhs`` (test ||r|| < tol * ||b||) or
    ``relative_to_initial`` (test ||r|| < tol * ||r0||).
    """

    kind: str = "relative_to_rhs"
    tol: float = 1e-6
    max_iters: int = 500

    def __post_init__(self):
        if self.kind not in ("relative_to_rhs", "relative_to_initial"):
            raise ContractError(f"unknown stopping rule {self.kind!r}")
        if not (0.0 < self.tol < 1.0):
            raise ContractError("tol must be in (0, 1)")
        if self.max_iters < 1:
            raise ContractError("max_iters must be positive")

    def threshold(self, r0_norm, b_norm):
        ref = b_norm if self.kind == "relative_to_rhs" else r0_norm
        return self.tol * ref


def check_stop(rule, r_norm, r0_norm, b_norm):
    """True when the residual satisfies the rule's threshold."""
    return r_norm < rule.threshold(r0_norm, b_norm)


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    residual_history: np.ndarray
    r0_norm: float
    b_norm: float
    true_residual: float
    threshold: float
    wall_time_s: float
    basis_size: int = 0
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    ritz_frozen_at_step: int = None

    @property
    def time_per_iteration_s(self):
        return self.wall_time_s / self.iterations if self.iterations else 0.0


class DeflationState:
    """Recycled deflation basis shared by consecutive solves."""

    def __init__(self, strategy="none", limit=50):
        strategy = strategy.lower()
        if strategy not in STRATEGIES:
            raise ContractError(
                f"unknown strategy {strategy!r}, expected one of {STRATEGIES}"
            )
        if limit < 1:
            raise ContractError("basis limit must be positive")
        self.strategy = strategy
        self.limit = int(limit)
        self.basis = None          # W, shape (n, k)
        self.basis_image = None    # A W
        self.gram_diag = None      # diag(W^T A W) for b1/b2
        self.gram_factor = None    # cho_factor(W^T A W) for b3/b4
        self.ortho_factor = None   # cho_factor(W^T W), used by the re-orth step
        self.directions = None     # search directions of the last solve
        self.directions_image = None
        self.ritz_prev = None
        self.ritz_curr = None
        self.frozen = False
        self.frozen_at_step = None
        self.update_count = 0

    @property
    def k(self):
        return 0 if self.basis is None else self.basis.shape[1]

    def diagonal_gram(self):
        return self.strategy in ("b1", "b2")

    def gram_solve(self, v):
        if self.diagonal_gram():
            return v / self.gram_diag if v.ndim == 1 else v / self.gram_diag[:, None]
        return scipy.linalg.cho_solve(self.gram_factor, v)

    def ortho_solve(self, v):
        return scipy.linalg.cho_solve(self.ortho_factor, v)

    def set_basis(self, W, AW, gram_diag=None, gram=None):
        self.basis = W
        self.basis_image = AW
        if self.diagonal_gram():
            self.gram_diag = gram_diag
        else:
            gram = 0.5 * (gram + gram.T)
            self.gram_factor = scipy.linalg.cho_factor(gram)
        wtw = W.T @ W
        self.ortho_factor = scipy.linalg.cho_factor(0.5 * (wtw + wtw.T))


def _finalize(apply_A, b, x, rule, r0_norm, b_norm, history, t0, k,
              alphas, betas, hit_threshold):
    true_res = float(np.linalg.norm(b - apply_A(x)))
    thr = rule.threshold(r0_norm, b_norm)
    converged = hit_threshold and true_res <= 10.0 * thr
    return SolveReport(
        iterations=len(history) - 1,
        converged=converged,
        residual_history=np.asarray(history),
        r0_norm=r0_norm,
        b_norm=b_norm,
        true_residual=true_res,
        threshold=thr,
        wall_time_s=time.perf_counter() - t0,
        basis_size=k,
        alphas=alphas,
        betas=betas,
    )


def pcg(apply_A, b, apply_M=None, x0=None, rule=None, callback=None):
    """Preconditioned conjugate gradients.

    The stopping test uses the recurrence residual; the true residual is
    recomputed at exit and the solve is flagged unconverged if it exceeds
    ten times the threshold.
    """
    rule = rule or StoppingRule()
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        x = np.zeros_like(b)
        return x, SolveReport(0, True, np.zeros(1), 0.0, 0.0, 0.0, 0.0,
                              time.perf_counter() - t0)
    if apply_M is None:
        apply_M = lambda v: v
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b.copy() if x0 is None else b - apply_A(x)
    r_norm = float(np.linalg.norm(r))
    r0_norm = r_norm
    history = [r_norm]
    alphas, betas = [], []
    if check_stop(rule, r_norm, r0_norm, b_norm):
        return x, _finalize(apply_A, b, x, rule, r0_norm, b_norm, history,
                            t0, 0, alphas, betas, True)
    z = apply_M(r)
    rz = float(r @ z)
    p = z.copy()
    hit = False
    for _ in range(rule.max_iters):
        Ap = apply_A(p)
        alpha = rz / float(p @ Ap)
        alphas.append(alpha)
        x += alpha * p
        r -= alpha * Ap
        r_norm = float(np.linalg.norm(r))
        history.append(r_norm)
        if callback is not None:
            callback(x, r)
        if check_stop(rule, r_norm, r0_norm, b_norm):
            hit = True
            break
        z = apply_M(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        betas.append(beta)
        p = z + beta * p
        rz = rz_new
    return x, _finalize(apply_A, b, x, rule, r0_norm, b_norm, history, t0, 0,
                        alphas, betas, hit)


def project_initial(state, apply_A, b, x_prev=None):
    """Initial guess whose residual is orthogonal to the basis."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x_prev is None else np.array(x_prev, dtype=np.float64)
    if state is None or state.k == 0:
        return x
    r = b - apply_A(x)
    return x + state.basis @ state.gram_solve(state.basis.T @ r)


def deflated_pcg(apply_A, b, state, apply_M=None, x_prev=None, rule=None,
                 callback=None):
    """Deflated PCG against the basis held in ``state``.

    With an empty basis this reduces exactly to ``pcg``.  All search
    directions and their A-images are stashed on the state for the
    between-systems basis update.
    """
    rule = rule or StoppingRule()
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    k = 0 if state is None else state.k
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        x = np.zeros_like(b)
        if state is not None:
            state.directions = np.zeros((n, 0))
            state.directions_image = np.zeros((n, 0))
        return x, SolveReport(0, True, np.zeros(1), 0.0, 0.0, 0.0, 0.0,
                              time.perf_counter() - t0, basis_size=k)
    if apply_M is None:
        apply_M = lambda v: v

    x = project_initial(state, apply_A, b, x_prev)
    if k == 0 and x_prev is None:
        r = b.copy()
    else:
        r = b - apply_A(x)
    r_norm = float(np.linalg.norm(r))
    r0_norm = r_norm
    history = [r_norm]
    alphas, betas = [], []
    P_cols, AP_cols = [], []

    def stash():
        if state is not None:
            if P_cols:
                state.directions = np.column_stack(P_cols)
                state.directions_image = np.column_stack(AP_cols)
            else:
                state.directions = np.zeros((n, 0))
                state.directions_image = np.zeros((n, 0))

    if check_stop(rule, r_norm, r0_norm, b_norm):
        stash()
        return x, _finalize(apply_A, b, x, rule, r0_norm, b_norm, history,
                            t0, k, alphas, betas, True)

    z = apply_M(r)
    rz = float(r @ z)
    if k:
        mu = state.gram_solve(state.basis_image.T @ z)
        p = z - state.basis @ mu
    else:
        p = z.copy()
    hit = False
    for _ in range(rule.max_iters):
        Ap = apply_A(p)
        P_cols.append(p.copy())
        AP_cols.append(Ap.copy())
        alpha = rz / float(p @ Ap)
        alphas.append(alpha)
        x += alpha * p
        r -= alpha * Ap
        if k:
            r -= state.basis @ state.ortho_solve(state.basis.T @ r)
        r_norm = float(np.linalg.norm(r))
        history.append(r_norm)
        if callback is not None:
            callback(x, r)
        if check_stop(rule, r_norm, r0_norm, b_norm):
            hit = True
            break
        z = apply_M(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        betas.append(beta)
        if k:
            mu = state.gram_solve(state.basis_image.T @ z)
            p = z + beta * p - state.basis @ mu
        else:
            p = z + beta * p
        rz = rz_new
    stash()
    return x, _finalize(apply_A, b, x, rule, r0_norm, b_norm, history, t0, k,
                        alphas, betas, hit)


def harmonic_ritz(V, AV, apply_M):
    """Harmonic Ritz pairs of the preconditioned operator on span(V).

    Solves (AV)^T M^{-1} (AV) y = theta V^T (AV) y from cached products,
    applying the preconditioner once per column of AV.  Returns values in
    descending order with vectors orthonormal in the right-hand metric.
    A singular right side gets one shifted retry.
    """
    MAV = np.column_stack([apply_M(AV[:, j]) for j in range(AV.shape[1])]) \
        if AV.shape[1] else np.zeros_like(AV)
    lhs = AV.T @ MAV
    lhs = 0.5 * (lhs + lhs.T)
    rhs = V.T @ AV
    rhs = 0.5 * (rhs + rhs.T)
    try:
        return generalized_sym_eig(lhs, rhs)
    except PencilNotDefiniteError:
        return generalized_sym_eig(lhs, rhs, shift=default_pencil_shift(rhs))


def ritz_converged(theta_curr, theta_prev, tol=RITZ_TOL):
    """Relative stagnation test between consecutive Ritz value sets."""
    if theta_curr is None or theta_prev is None:
        return False
    if len(theta_curr) != len(theta_prev) or len(theta_curr) == 0:
        return False
    denom = float(np.linalg.norm(theta_curr))
    if denom == 0.0:
        return False
    return float(np.linalg.norm(theta_curr - theta_prev)) / denom <= tol


def update_basis(state, apply_M=None, step=None):
    """Fold the last solve's directions into the basis, per strategy.

    Mutates and returns the state.  For b3/b4 the preconditioner is needed
    to form the harmonic Ritz pencil; once the Ritz values stagnate the
    basis freezes and later calls return immediately.
    """
    if state.strategy == "none" or state.frozen:
        return state
    P = state.directions
    AP = state.directions_image
    if P is None:
        return state

    if state.strategy in ("b1", "b2"):
        if P.shape[1]:
            new_diag = np.einsum("ij,ij->j", P, AP)
            if state.k == 0:
                W, AW, diag = P, AP, new_diag
            else:
                W = np.column_stack([state.basis, P])
                AW = np.column_stack([state.basis_image, AP])
                diag = np.concatenate([state.gram_diag, new_diag])
            if state.strategy == "b1":
                W, AW, diag = W[:, :state.limit], AW[:, :state.limit], diag[:state.limit]
            else:
                W, AW, diag = W[:, -state.limit:], AW[:, -state.limit:], diag[-state.limit:]
            state.set_basis(W, AW, gram_diag=diag)
            state.update_count += 1
        if state.strategy == "b1" and state.k >= state.limit:
            state.frozen = True
            state.frozen_at_step = step
        state.directions = state.directions_image = None
        return state

    # b3 / b4
    if apply_M is None:
        apply_M = lambda v: v
    if state.k == 0 and P.shape[1] == 0:
        return state
    if state.k:
        V = np.column_stack([state.basis, P])
        AV = np.column_stack([state.basis_image, AP])
    else:
        V, AV = P, AP
    scale = np.linalg.norm(V, axis=0)
    scale[scale == 0.0] = 1.0
    V = V / scale
    AV = AV / scale
    theta, Y = harmonic_ritz(V, AV, apply_M)
    m = min(state.limit, len(theta))
    if state.strategy == "b4":
        sel = slice(0, m)           # largest, kept in descending order
        theta_sel = theta[sel]
        Y_sel = Y[:, sel]
    else:
        theta_sel = theta[-m:][::-1].copy()   # smallest, ascending order
        Y_sel = Y[:, -m:][:, ::-1].copy()
    W = V @ Y_sel
    AW = AV @ Y_sel
    gram = Y_sel.T @ (V.T @ AV) @ Y_sel
    state.set_basis(W, AW, gram=gram)
    state.update_count += 1
    state.ritz_prev = state.ritz_curr
    state.ritz_curr = theta_sel
    if (len(theta_sel) == state.limit
            and ritz_converged(state.ritz_curr, state.ritz_prev)):
        state.frozen = True
        state.frozen_at_step = step
    state.directions = state.directions_image = None
    return state


def write_residual_csv(reports, path):
    """Per-iteration residual histories, one row per (step, iter)."""
    with open(path, "w") as fh:
        fh.write("step,iter,relres_rhs,relres_r0\n")
        for step, rep in enumerate(reports, start=1):
            b = rep.b_norm or 1.0
            r0 = rep.r0_norm or 1.0
            for it, rn in enumerate(rep.residual_history):
                fh.write(f"{step},{it},{rn / b:.16e},{rn / r0:.16e}\n")


def write_ritz_csv(ritz_per_step, limit, path):
    """Ritz values per step; steps without values leave the columns blank."""
    cols = ",".join(f"theta_{j + 1}" for j in range(limit))
    with open(path, "w") as fh:
        fh.write(f"step,{cols}\n")
        for step, theta in enumerate(ritz_per_step, start=1):
            vals = [""] * limit
            if theta is not None:
                for j, t in enumerate(theta[:limit]):
                    vals[j] = f"{t:.16e}"
            fh.write(f"{step},{','.join(vals)}\n")
