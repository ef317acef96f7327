"""Adaptive coarse-space enrichment from face eigenvalue problems.

For every inter-subdomain face, a generalized eigenvalue problem on the
two touching subdomains measures how badly the existing coarse
constraints control the energy of interface jumps across that face.
Eigenvalues above a user threshold spawn extra constraint rows, built
from the offending eigenvectors, that both subdomains then share.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .bddc import bddc_setup
from .linalg import default_pencil_shift, generalized_sym_eig
from .parallel import map_indexed

__all__ = [
    "AdaptiveConfig",
    "FacePair",
    "FaceReport",
    "build_face_pairs",
    "pair_eigenproblem",
    "enrich_constraints",
    "adaptive_setup",
    "write_face_csv",
]

ROW_DROP_TOL = 1e-12


@dataclass
class AdaptiveConfig:
    tau: float = 3.0
    max_vectors_per_face: int = 10


@dataclass
class FacePair:
    """One face shared by exactly two subdomains, with everything the
    eigenvalue problem needs in local pair coordinates.

    The pair space concatenates the full interface dof sets of both
    subdomains; the first block belongs to the lower-numbered one.
    """

    face_id: int
    glob: object
    s: int
    t: int
    schur_s: np.ndarray
    schur_t: np.ndarray
    shared: np.ndarray
    pos_s: np.ndarray
    pos_t: np.ndarray
    face_mask: np.ndarray
    weight_s: np.ndarray
    face_pos_s: np.ndarray
    face_pos_t: np.ndarray

    @property
    def dim(self):
        return self.schur_s.shape[0] + self.schur_t.shape[0]

    def jump_operator(self):
        """Matrix of I - E where E averages pair values on shared dofs."""
        n = self.dim
        off = self.schur_s.shape[0]
        Z = np.zeros((n, n))
        e_s = self.weight_s
        e_t = 1.0 - e_s
        for k in range(len(self.shared)):
            i, j = self.pos_s[k], off + self.pos_t[k]
            Z[i, i] = e_t[k]
            Z[i, j] = -e_t[k]
            Z[j, j] = e_s[k]
            Z[j, i] = -e_s[k]
        return Z

    def difference_rows(self):
        """Jump functionals for the constraints both subdomains share:
        the glob's rows over the open face, one row per shared corner."""
        n = self.dim
        off = self.schur_s.shape[0]
        rows = []
        for r in self.glob.rows:
            row = np.zeros(n)
            row[self.face_pos_s] = r
            row[off + self.face_pos_t] = -np.asarray(r)
            rows.append(row)
        for k in np.nonzero(~self.face_mask)[0]:
            row = np.zeros(n)
            row[self.pos_s[k]] = 1.0
            row[off + self.pos_t[k]] = -1.0
            rows.append(row)
        return np.array(rows)

    def constraint_projector(self):
        D = self.difference_rows()
        n = self.dim
        if D.shape[0] == 0:
            return np.eye(n)
        _, sv, Vt = np.linalg.svd(D, full_matrices=False)
        tol = max(D.shape) * np.finfo(np.float64).eps * (sv[0] if len(sv) else 0.0)
        Q = Vt[sv > tol]
        return np.eye(n) - Q.T @ Q


@dataclass
class FaceReport:
    face_id: int
    s: int
    t: int
    eigenvalues: list
    rows_added: int = 0


def build_face_pairs(subdomains, weights, constraints, workers=1):
    """Assemble a FacePair for every edge glob of the coarse constraints."""
    edge_globs = constraints.edge_globs()
    involved = sorted({s for g in edge_globs for s in g.sharers})
    schurs = dict(
        zip(
            involved,
            map_indexed(
                lambda j: subdomains[involved[j]].dense_schur(),
                len(involved),
                workers,
            ),
        )
    )
    pairs = []
    for fid, g in enumerate(edge_globs):
        s, t = g.sharers
        sub_s, sub_t = subdomains[s], subdomains[t]
        shared = np.intersect1d(sub_s.interface_global, sub_t.interface_global)
        pos_s = np.searchsorted(sub_s.interface_global, shared)
        pos_t = np.searchsorted(sub_t.interface_global, shared)
        face_mask = np.isin(shared, g.dofs)
        d_s = weights.per_sub[s][pos_s]
        d_t = weights.per_sub[t][pos_t]
        pairs.append(
            FacePair(
                face_id=fid,
                glob=g,
                s=s,
                t=t,
                schur_s=schurs[s],
                schur_t=schurs[t],
                shared=shared,
                pos_s=pos_s,
                pos_t=pos_t,
                face_mask=face_mask,
                weight_s=d_s / (d_s + d_t),
                face_pos_s=np.searchsorted(sub_s.interface_global, g.dofs),
                face_pos_t=np.searchsorted(sub_t.interface_global, g.dofs),
            )
        )
    return pairs


def pair_eigenproblem(pair, cfg=None):
    """Solve the face eigenvalue problem of one subdomain pair.

    Returns eigenvalues in descending order and eigenvectors as columns
    of the pencil  P J' A J P  v = lambda  P A P  v,  where A stacks the
    two local Schur complements, J is the weighted jump operator and P
    projects onto vectors already satisfying the shared constraints.
    The right side is always regularized by a trace-scaled shift.
    """
    A = np.zeros((pair.dim, pair.dim))
    ns = pair.schur_s.shape[0]
    A[:ns, :ns] = pair.schur_s
    A[ns:, ns:] = pair.schur_t
    Z = pair.jump_operator()
    P = pair.constraint_projector()
    lhs = P @ (Z.T @ A @ Z) @ P
    rhs = P @ A @ P
    lhs = 0.5 * (lhs + lhs.T)
    rhs = 0.5 * (rhs + rhs.T)
    values, vectors = generalized_sym_eig(
        lhs, rhs, shift=default_pencil_shift(rhs)
    )
    return values, vectors


def _constraint_row_from_vector(pair, A, Z, w):
    """Turn one eigenvector into a face-restricted constraint row.

    The vector J' A J w lives only on shared dofs and is antisymmetric
    between the two sides, so its lower-side face part captures the whole
    functional once corners are pinned.  Rows whose face part is
    negligible relative to the full vector are rejected (returns None).
    """
    c_full = Z.T @ (A @ (Z @ w))
    row = c_full[pair.face_pos_s].copy()
    full_norm = np.linalg.norm(c_full)
    if np.linalg.norm(row) <= ROW_DROP_TOL * full_norm or full_norm == 0.0:
        return None
    k = np.argmax(np.abs(row))
    if row[k] < 0.0:
        row = -row
    return row / np.linalg.norm(row)


def enrich_constraints(pairs, eigpairs, cfg):
    """Append adaptive rows for eigenvalues above cfg.tau, at most
    cfg.max_vectors_per_face rows per face.  Both sharing subdomains see
    the identical row, so it defines a single new coarse dof."""
    reports = []
    for pair, (values, vectors) in zip(pairs, eigpairs):
        A = np.zeros((pair.dim, pair.dim))
        ns = pair.schur_s.shape[0]
        A[:ns, :ns] = pair.schur_s
        A[ns:, ns:] = pair.schur_t
        Z = pair.jump_operator()
        report = FaceReport(
            face_id=pair.face_id,
            s=pair.s,
            t=pair.t,
            eigenvalues=[float(v) for v in values[:10]],
        )
        added = 0
        for j in range(len(values)):
            if values[j] <= cfg.tau or added >= cfg.max_vectors_per_face:
                break
            row = _constraint_row_from_vector(pair, A, Z, vectors[:, j])
            if row is None:
                continue
            pair.glob.rows.append(row)
            added += 1
        report.rows_added = added
        reports.append(report)
    return reports


def adaptive_setup(subdomains, imap, weights, constraints, cfg, workers=1):
    """Enrich the coarse constraints from face eigenproblems, then build
    the preconditioner on the enriched space."""
    pairs = build_face_pairs(subdomains, weights, constraints, workers)
    eigpairs = map_indexed(
        lambda i: pair_eigenproblem(pairs[i], cfg), len(pairs), workers
    )
    reports = enrich_constraints(pairs, eigpairs, cfg)
    P = bddc_setup(subdomains, constraints, weights, workers, imap=imap)
    P.face_reports = reports
    return P


def write_face_csv(reports, path, n_cols=10):
    """Per-face eigenvalue summary: face id, subdomain pair, the leading
    eigenvalues (blank-padded), and how many rows were added."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["face", "s", "t"]
        header += [f"lambda_{k + 1}" for k in range(n_cols)]
        header += ["rows_added"]
        writer.writerow(header)
        for rep in reports:
            vals = [f"{v:.17g}" for v in rep.eigenvalues[:n_cols]]
            vals += [""] * (n_cols - len(vals))
            writer.writerow([rep.face_id, rep.s, rep.t] + vals + [rep.rows_added])
