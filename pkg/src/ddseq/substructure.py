"""Non-overlapping decomposition of an assembled problem.

Each subdomain keeps its locally assembled (Neumann) matrix blocked into
interior and interface parts, with the interior block factored once.  The
global interface operator is never formed; its action is the sum of local
Schur complement actions.  All reductions run in fixed subdomain order so
results do not depend on the worker count.
"""

from dataclasses import dataclass, field

import numpy as np

from . import meshfem
from .errors import ContractError
from .linalg import SparseMatrix, SpdFactorization, factorize_spd, spmv
from .parallel import map_indexed

__all__ = [
    "SubdomainData",
    "InterfaceMap",
    "build_subdomains",
    "schur_apply",
    "condense_rhs",
    "recover_interior",
]


@dataclass
class InterfaceMap:
    """Global numbering of interface equations.

    eqs[g] is the global equation id of interface dof g, nodes[g] the mesh
    node it came from (or -1 for hand-built problems), and mult[g] how many
    subdomains share it.  n_equations covers interiors plus interface.
    """

    size: int
    eqs: np.ndarray
    nodes: np.ndarray
    mult: np.ndarray
    n_equations: int


@dataclass
class SubdomainData:
    """One subdomain's share of the problem, interior dofs ordered first."""

    index: int
    interior_eqs: np.ndarray
    interface_global: np.ndarray
    mult_local: np.ndarray
    K_local: SparseMatrix
    K_II: SparseMatrix
    K_IG: SparseMatrix
    K_GI: SparseMatrix
    K_GG: SparseMatrix
    interior_factor: SpdFactorization
    f_interior: np.ndarray
    f_interface: np.ndarray
    interior_nodes: np.ndarray = field(default=None, repr=False)
    interface_nodes: np.ndarray = field(default=None, repr=False)

    @property
    def n_interior(self):
        return len(self.interior_eqs)

    @property
    def n_interface(self):
        return len(self.interface_global)

    def schur_action(self, xg):
        """Local Schur complement times a local interface vector."""
        y = spmv(self.K_GG, xg)
        if self.n_interior:
            t = self.interior_factor.solve(spmv(self.K_IG, xg))
            y -= spmv(self.K_GI, t)
        return y

    def dense_schur(self):
        """Local Schur complement as a dense matrix (pair eigenproblems)."""
        S = self.K_GG.to_dense()
        if self.n_interior:
            S = S - self.K_GI.to_dense() @ self.interior_factor.solve(
                self.K_IG.to_dense()
            )
        return S


def build_subdomains(K, f, mesh, partition, bc):
    """Split the assembled problem into per-subdomain data.

    K and f are the Dirichlet-eliminated operator and load from meshfem.
    A free node is interface when elements of two or more subdomains touch
    it, interior otherwise.  Interface loads are split by multiplicity so
    that summing the local parts reassembles f on the interface.
    """
    dof_map = meshfem.dof_map_for(mesh, bc)
    n_eqs = int(dof_map.max()) + 1
    if K.n_rows != n_eqs:
        raise ContractError(
            f"operator has {K.n_rows} rows but the mesh/bc pair gives {n_eqs}"
        )
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (n_eqs,):
        raise ContractError("rhs length does not match the operator")

    sub_nodes = []
    count = np.zeros(mesh.n_nodes, dtype=np.int64)
    for s in range(partition.n_subdomains):
        nodes = np.unique(mesh.connectivity[partition.elements_of(s)].ravel())
        sub_nodes.append(nodes)
        count[nodes] += 1

    free = dof_map >= 0
    iface_mask = free & (count >= 2)
    iface_nodes = np.flatnonzero(iface_mask)
    # sort by equation id (equals node order for our dof maps, but explicit)
    iface_nodes = iface_nodes[np.argsort(dof_map[iface_nodes], kind="stable")]
    iface_eqs = dof_map[iface_nodes]
    iface_of_eq = np.full(n_eqs, -1, dtype=np.int64)
    iface_of_eq[iface_eqs] = np.arange(len(iface_eqs))
    imap = InterfaceMap(
        size=len(iface_eqs),
        eqs=iface_eqs,
        nodes=iface_nodes,
        mult=count[iface_nodes],
        n_equations=n_eqs,
    )

    subdomains = []
    for s in range(partition.n_subdomains):
        nodes = sub_nodes[s]
        nodes = nodes[dof_map[nodes] >= 0]
        interior = nodes[count[nodes] == 1]
        interface = nodes[count[nodes] >= 2]
        local_nodes = np.concatenate([interior, interface])
        nI = len(interior)

        K_s = meshfem.assemble_laplacian_full(
            mesh, elements=partition.elements_of(s)
        ).to_scipy()
        K_loc = K_s[local_nodes][:, local_nodes].tocsr()
        K_II = K_loc[:nI, :nI]
        K_IG = K_loc[:nI, nI:]
        K_GI = K_loc[nI:, :nI]
        K_GG = K_loc[nI:, nI:]

        interior_eqs = dof_map[interior]
        gamma_global = iface_of_eq[dof_map[interface]]
        mult_local = imap.mult[gamma_global]
        subdomains.append(
            SubdomainData(
                index=s,
                interior_eqs=interior_eqs,
                interface_global=gamma_global,
                mult_local=mult_local,
                K_local=SparseMatrix.from_scipy(K_loc),
                K_II=SparseMatrix.from_scipy(K_II),
                K_IG=SparseMatrix.from_scipy(K_IG),
                K_GI=SparseMatrix.from_scipy(K_GI),
                K_GG=SparseMatrix.from_scipy(K_GG),
                interior_factor=factorize_spd(SparseMatrix.from_scipy(K_II)),
                f_interior=f[interior_eqs],
                f_interface=f[dof_map[interface]] / mult_local,
                interior_nodes=interior,
                interface_nodes=interface,
            )
        )
    return subdomains, imap


def schur_apply(subdomains, imap, x, workers=1):
    """Apply the assembled interface Schur complement to x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (imap.size,):
        raise ContractError("interface vector has the wrong length")

    def local(s):
        sub = subdomains[s]
        return sub.schur_action(x[sub.interface_global])

    parts = map_indexed(local, len(subdomains), workers)
    y = np.zeros(imap.size)
    for sub, part in zip(subdomains, parts):
        np.add.at(y, sub.interface_global, part)
    return y


def condense_rhs(subdomains, imap, f, workers=1):
    """Interface right-hand side after eliminating the interiors."""
    f = np.asarray(f, dtype=np.float64)

    def local(s):
        sub = subdomains[s]
        b_loc = f[imap.eqs[sub.interface_global]] / sub.mult_local
        if sub.n_interior:
            t = sub.interior_factor.solve(f[sub.interior_eqs])
            b_loc = b_loc - spmv(sub.K_GI, t)
        return b_loc

    parts = map_indexed(local, len(subdomains), workers)
    b = np.zeros(imap.size)
    for sub, part in zip(subdomains, parts):
        np.add.at(b, sub.interface_global, part)
    return b


def recover_interior(subdomains, imap, x_gamma, f=None):
    """Back-substitute the interface solution into the interiors.

    Returns the solution on all equations.  f defaults to the load captured
    at build time; pass the current step's load when solving a sequence.
    """
    x = np.zeros(imap.n_equations)
    x[imap.eqs] = x_gamma
    for sub in subdomains:
        if not sub.n_interior:
            continue
        fI = sub.f_interior if f is None else f[sub.interior_eqs]
        rhs = fI - spmv(sub.K_IG, x_gamma[sub.interface_global])
        x[sub.interior_eqs] = sub.interior_factor.solve(rhs)
    return x
