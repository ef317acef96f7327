"""Two-level BDDC preconditioner for the interface problem.

Coarse degrees of freedom are functionals on subdomain interfaces: values
at corner nodes, arithmetic averages over inter-subdomain edges, and
optionally adaptive rows appended by the enrichment pass.  Each subdomain
solves a constrained (saddle-point) Neumann problem; a global coarse
problem couples the subdomains.  Interface weights distribute residuals
and glue local corrections back together.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.lapack import dsytrf, dsytrs

from .errors import ContractError, InsufficientCoarseDofsError
from .linalg import SparseMatrix, factorize_spd
from .parallel import map_indexed

__all__ = [
    "CoarseGlob",
    "CoarseConstraints",
    "InterfaceWeights",
    "CoarseSpace",
    "BddcPreconditioner",
    "select_coarse_dofs",
    "build_weights",
    "bddc_setup",
    "bddc_apply",
    "dump_diagnostics",
]


@dataclass
class CoarseGlob:
    """A corner node or an inter-subdomain edge with its constraint rows.

    dofs are global interface indices; every row is a functional over
    those dofs.  Corner globs carry the single row [1].  Edge globs start
    with the arithmetic average and may gain adaptive rows later.
    """

    kind: str
    sharers: tuple
    dofs: np.ndarray
    rows: list = field(default_factory=list)

    @property
    def n_rows(self):
        return len(self.rows)


class CoarseConstraints:
    """Constraint rows grouped by glob, shared between subdomains.

    Rows of one glob are orthonormalized together (deterministic QR with a
    positive-diagonal convention) when materialized, so per-subdomain
    constraint matrices always have orthonormal rows; rows of different
    globs never overlap.
    """

    def __init__(self, globs, n_interface):
        self.globs = list(globs)
        self.n_interface = n_interface

    def subdomains_with_constraints(self):
        out = set()
        for g in self.globs:
            out.update(g.sharers)
        return out

    @property
    def n_coarse(self):
        return sum(g.n_rows for g in self.globs)

    def adaptive_row_count(self):
        return sum(
            g.n_rows - 1 for g in self.globs if g.kind == "edge"
        )

    def edge_globs(self):
        return [g for g in self.globs if g.kind == "edge"]

    def _orthonormal_rows(self, glob, drop_tol=1e-12):
        rows = np.atleast_2d(np.array(glob.rows, dtype=np.float64))
        if rows.shape[0] == 1:
            nrm = np.linalg.norm(rows[0])
            if nrm == 0.0:
                raise ContractError("zero constraint row")
            return rows / nrm
        norms = np.linalg.norm(rows, axis=1)
        q, r = np.linalg.qr(rows.T)
        keep = np.abs(np.diag(r)) > drop_tol * np.maximum(norms, 1.0)
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        q = q * signs
        return q.T[keep]

    def materialize(self, subdomains):
        """Per-subdomain constraint matrices and global coarse numbering.

        Returns (C_list, ids_list, n_coarse) where C_list[i] is dense with
        one row per coarse dof of subdomain i over its interface dofs and
        ids_list[i] maps those rows to global coarse indices.
        """
        order = sorted(
            range(len(self.globs)),
            key=lambda j: (self.globs[j].kind != "corner",
                           int(self.globs[j].dofs[0]),
                           self.globs[j].sharers),
        )
        glob_rows = {}
        next_id = 0
        glob_ids = {}
        for j in order:
            rows = self._orthonormal_rows(self.globs[j])
            glob_rows[j] = rows
            glob_ids[j] = np.arange(next_id, next_id + rows.shape[0])
            next_id += rows.shape[0]

        C_list, ids_list = [], []
        for sub in subdomains:
            pos_of = {int(g): p for p, g in enumerate(sub.interface_global)}
            rows_here, ids_here = [], []
            for j in order:
                g = self.globs[j]
                if sub.index not in g.sharers:
                    continue
                cols = np.array([pos_of[int(d)] for d in g.dofs])
                for r, cid in zip(glob_rows[j], glob_ids[j]):
                    full = np.zeros(sub.n_interface)
                    full[cols] = r
                    rows_here.append(full)
                    ids_here.append(cid)
            C = (np.array(rows_here) if rows_here
                 else np.zeros((0, sub.n_interface)))
            C_list.append(C)
            ids_list.append(np.array(ids_here, dtype=np.int64))
        return C_list, ids_list, next_id


def select_coarse_dofs(imap, mesh, partition):
    """Classify interface dofs into corners and edges and seed constraints.

    Corners are interface nodes shared by three or more subdomains plus
    nodes sitting on the partition's box-corner lattice.  The remaining
    interface dofs, grouped by their sharing pair, form edges; each edge
    gets one arithmetic-average row.
    """
    sharers = [set() for _ in range(imap.size)]
    node_to_iface = {int(n): g for g, n in enumerate(imap.nodes)}
    for s in range(partition.n_subdomains):
        nodes = np.unique(mesh.connectivity[partition.elements_of(s)].ravel())
        for n in nodes:
            g = node_to_iface.get(int(n))
            if g is not None:
                sharers[g].add(s)

    globs = []
    edge_members = {}
    for g in range(imap.size):
        node = int(imap.nodes[g])
        ix, iy = mesh.node_grid_coords(node)
        on_lattice = (ix % partition.ex_per == 0) and (iy % partition.ey_per == 0)
        if imap.mult[g] >= 3 or on_lattice:
            globs.append(
                CoarseGlob(
                    kind="corner",
                    sharers=tuple(sorted(sharers[g])),
                    dofs=np.array([g], dtype=np.int64),
                    rows=[np.array([1.0])],
                )
            )
        else:
            key = tuple(sorted(sharers[g]))
            if len(key) != 2:
                raise ContractError(
                    f"interface dof {g} shared by {len(key)} subdomains "
                    "escaped corner classification"
                )
            edge_members.setdefault(key, []).append(g)

    for key in sorted(edge_members):
        dofs = np.array(sorted(edge_members[key]), dtype=np.int64)
        avg = np.full(len(dofs), 1.0 / len(dofs))
        globs.append(CoarseGlob(kind="edge", sharers=key, dofs=dofs, rows=[avg]))

    constraints = CoarseConstraints(globs, imap.size)
    covered = constraints.subdomains_with_constraints()
    for s in range(partition.n_subdomains):
        if s not in covered:
            raise InsufficientCoarseDofsError(s, "no constraints selected")
    return constraints


@dataclass
class InterfaceWeights:
    scheme: str
    per_sub: list

    def partition_of_unity_defect(self, subdomains, imap):
        acc = np.zeros(imap.size)
        for sub, d in zip(subdomains, self.per_sub):
            np.add.at(acc, sub.interface_global, d)
        return np.abs(acc - 1.0).max() if imap.size else 0.0


def build_weights(imap, scheme, subdomains):
    """Interface weights: inverse multiplicity (card) or stiffness-diagonal
    ratios (diag).  Either way they sum to one across sharing subdomains."""
    if scheme == "card":
        per_sub = [1.0 / sub.mult_local for sub in subdomains]
        return InterfaceWeights("card", per_sub)
    if scheme != "diag":
        raise ContractError(f"unknown weight scheme {scheme!r}")
    numerators = []
    denom = np.zeros(imap.size)
    for sub in subdomains:
        d = sub.K_local.diagonal()[sub.n_interior:]
        if np.any(d == 0.0):
            raise ContractError(
                f"zero stiffness diagonal on subdomain {sub.index} interface"
            )
        numerators.append(d)
        np.add.at(denom, sub.interface_global, d)
    per_sub = [
        num / denom[sub.interface_global]
        for sub, num in zip(subdomains, numerators)
    ]
    return InterfaceWeights("diag", per_sub)


class _SaddleFactor:
    """Symmetric indefinite factorization of [[K, C^T], [C, 0]]."""

    def __init__(self, mat, subdomain):
        lu, piv, info = dsytrf(mat, lower=1)
        if info > 0:
            raise InsufficientCoarseDofsError(
                subdomain, "singular saddle factorization"
            )
        if info < 0:
            raise ValueError(f"illegal argument {-info} passed to dsytrf")
        self.lu = lu
        self.piv = piv

    def solve(self, rhs):
        x, info = dsytrs(self.lu, self.piv, rhs, lower=1)
        if info != 0:
            raise ValueError(f"illegal argument {-info} passed to dsytrs")
        return x


@dataclass
class CoarseSpace:
    C: list
    coarse_ids: list
    Phi: list
    Phi_iface: list
    K_C: SparseMatrix
    factor: object
    n_coarse: int


class BddcPreconditioner:
    def __init__(self, subdomains, imap, weights, constraints, coarse,
                 saddles, workers=1):
        self.subdomains = subdomains
        self.imap = imap
        self.weights = weights
        self.constraints = constraints
        self.coarse = coarse
        self.saddles = saddles
        self.workers = workers
        self.face_reports = None

    def apply(self, r):
        return bddc_apply(self, r)

    def diagnostics(self):
        per_sub = [
            {
                "subdomain": sub.index,
                "n_interior": sub.n_interior,
                "n_interface": sub.n_interface,
                "n_coarse_dofs": int(len(self.coarse.coarse_ids[i])),
            }
            for i, sub in enumerate(self.subdomains)
        ]
        corners = sum(1 for g in self.constraints.globs if g.kind == "corner")
        edges = sum(1 for g in self.constraints.globs if g.kind == "edge")
        if self.imap is not None:
            iface = self.imap.size
        else:
            iface = self.constraints.n_interface
        return {
            "coarse_order": self.coarse.n_coarse,
            "n_corner_globs": corners,
            "n_edge_globs": edges,
            "n_adaptive_rows": self.constraints.adaptive_row_count(),
            "weights_scheme": self.weights.scheme,
            "interface_size": iface,
            "subdomains": per_sub,
        }


def bddc_setup(subdomains, constraints, weights, workers=1, imap=None):
    """Factor the local saddle systems, build the coarse basis and problem.

    Each subdomain's coarse basis solves its saddle system with unit loads
    on the constraint rows; the coarse matrix accumulates the local coarse
    stiffness through the coarse-to-global maps and is factored directly.
    """
    C_list, ids_list, n_coarse = constraints.materialize(subdomains)

    def build_local(i):
        sub = subdomains[i]
        C = C_list[i]
        nc = C.shape[0]
        if nc == 0:
            raise InsufficientCoarseDofsError(sub.index, "no constraints")
        nloc = sub.n_interior + sub.n_interface
        saddle = np.zeros((nloc + nc, nloc + nc))
        saddle[:nloc, :nloc] = sub.K_local.to_dense()
        saddle[nloc:, sub.n_interior:nloc] = C
        saddle[sub.n_interior:nloc, nloc:] = C.T
        factor = _SaddleFactor(saddle, sub.index)
        rhs = np.zeros((nloc + nc, nc))
        rhs[nloc:] = np.eye(nc)
        Phi = factor.solve(rhs)[:nloc]
        KPhi = sub.K_local.to_scipy() @ Phi
        return factor, Phi, Phi.T @ KPhi

    built = map_indexed(build_local, len(subdomains), workers)
    K_C = np.zeros((n_coarse, n_coarse))
    for (_, _, kc_loc), ids in zip(built, ids_list):
        K_C[np.ix_(ids, ids)] += kc_loc
    K_C_sparse = SparseMatrix.from_dense(K_C)
    coarse = CoarseSpace(
        C=C_list,
        coarse_ids=ids_list,
        Phi=[b[1] for b in built],
        Phi_iface=[b[1][subdomains[i].n_interior:]
                   for i, b in enumerate(built)],
        K_C=K_C_sparse,
        factor=factorize_spd(K_C_sparse),
        n_coarse=n_coarse,
    )
    return BddcPreconditioner(
        subdomains, imap, weights, constraints, coarse,
        [b[0] for b in built], workers,
    )


def bddc_apply(P, r):
    """One preconditioner application z = M^{-1} r on the interface."""
    subs = P.subdomains
    weights = P.weights.per_sub
    coarse = P.coarse

    def weighted_residual(i):
        sub = subs[i]
        return weights[i] * r[sub.interface_global]

    r_loc = map_indexed(weighted_residual, len(subs), P.workers)

    r_C = np.zeros(coarse.n_coarse)
    for i, rl in enumerate(r_loc):
        np.add.at(r_C, coarse.coarse_ids[i], coarse.Phi_iface[i].T @ rl)
    u_C = coarse.factor.solve(r_C)

    def local_solve(i):
        sub = subs[i]
        nloc = sub.n_interior + sub.n_interface
        nc = coarse.C[i].shape[0]
        rhs = np.zeros(nloc + nc)
        rhs[sub.n_interior:nloc] = r_loc[i]
        u = P.saddles[i].solve(rhs)[:nloc]
        combo = u[sub.n_interior:] + coarse.Phi_iface[i] @ u_C[coarse.coarse_ids[i]]
        return weights[i] * combo

    parts = map_indexed(local_solve, len(subs), P.workers)
    z = np.zeros(r.shape[0])
    for sub, part in zip(subs, parts):
        np.add.at(z, sub.interface_global, part)
    return z


def dump_diagnostics(P, path):
    with open(path, "w") as fh:
        json.dump(P.diagnostics(), fh, indent=2)
        fh.write("\n")
