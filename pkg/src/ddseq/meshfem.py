"""Structured Q1 finite elements on a rectangle.

Nodes are numbered lexicographically with x fastest, elements likewise.
Dirichlet conditions are eliminated from the assembled operators (no
penalty terms), with a dof map from node ids to equation ids.
"""

import numpy as np
import scipy.sparse as sp

from .errors import ContractError
from .linalg import SparseMatrix

__all__ = [
    "Mesh",
    "BoundaryCondition",
    "Partition",
    "build_grid",
    "assemble_laplacian",
    "assemble_laplacian_full",
    "assemble_mass",
    "reduce_operator",
    "reduce_load",
    "partition_boxes",
    "dump_mesh_csv",
    "dump_partition_csv",
]

_EDGES = ("left", "right", "bottom", "top")

# 2x2 Gauss points on [-1, 1], exact for the bilinear integrands below
_GP = np.array([-1.0, 1.0]) / np.sqrt(3.0)


class Mesh:
    """Uniform nx-by-ny grid of quadrilateral elements on [0,lx] x [0,ly]."""

    def __init__(self, nx, ny, lx, ly):
        if nx < 1 or ny < 1:
            raise ContractError("grid needs at least one element per direction")
        if lx <= 0 or ly <= 0:
            raise ContractError("domain lengths must be positive")
        self.nx = int(nx)
        self.ny = int(ny)
        self.lx = float(lx)
        self.ly = float(ly)
        self.dx = self.lx / self.nx
        self.dy = self.ly / self.ny
        self.n_nodes = (self.nx + 1) * (self.ny + 1)
        self.n_elements = self.nx * self.ny
        ix = np.arange(self.nx + 1)
        iy = np.arange(self.ny + 1)
        self.node_x = np.tile(ix * self.dx, self.ny + 1)
        self.node_y = np.repeat(iy * self.dy, self.nx + 1)
        ex = np.tile(np.arange(self.nx), self.ny)
        ey = np.repeat(np.arange(self.ny), self.nx)
        n0 = ey * (self.nx + 1) + ex
        # counterclockwise: lower-left, lower-right, upper-right, upper-left
        self.connectivity = np.column_stack(
            [n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1]
        ).astype(np.int64)

    def node_id(self, ix, iy):
        return iy * (self.nx + 1) + ix

    def node_grid_coords(self, node):
        return node % (self.nx + 1), node // (self.nx + 1)

    def boundary_nodes(self, edge):
        if edge not in _EDGES:
            raise ContractError(f"unknown edge {edge!r}, expected one of {_EDGES}")
        ix = np.arange(self.nx + 1)
        iy = np.arange(self.ny + 1)
        if edge == "left":
            return self.node_id(0, iy)
        if edge == "right":
            return self.node_id(self.nx, iy)
        if edge == "bottom":
            return self.node_id(ix, 0)
        return self.node_id(ix, self.ny)

    def all_boundary_nodes(self):
        nodes = np.concatenate([self.boundary_nodes(e) for e in _EDGES])
        return np.unique(nodes)


class BoundaryCondition:
    """Dirichlet data on a set of nodes; everything else is natural."""

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.nodes.shape != self.values.shape:
            raise ContractError("dirichlet nodes and values must align")
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ContractError("duplicate dirichlet nodes")

    @classmethod
    def on_edges(cls, mesh, edges, value=0.0):
        """Fix the listed edges; value may be a constant or f(x, y)."""
        nodes = np.unique(
            np.concatenate([mesh.boundary_nodes(e) for e in edges])
        )
        if callable(value):
            vals = np.array(
                [value(mesh.node_x[n], mesh.node_y[n]) for n in nodes]
            )
        else:
            vals = np.full(len(nodes), float(value))
        return cls(nodes, vals)

    @classmethod
    def at_nodes(cls, nodes, values=0.0):
        nodes = np.asarray(nodes, dtype=np.int64)
        if np.ndim(values) == 0:
            values = np.full(len(nodes), float(values))
        return cls(nodes, values)


def build_grid(nx, ny, lx=1.0, ly=1.0):
    return Mesh(nx, ny, lx, ly)


def q1_quadrature(dx, dy):
    """Shape values and physical derivatives at the 2x2 Gauss points.

    Returns (N, dNdx, dNdy, w) with one row per quadrature point and one
    column per local node; w includes the Jacobian dx*dy/4.
    """
    signs = np.array([(-1, -1), (1, -1), (1, 1), (-1, 1)], dtype=np.float64)
    pts = [(xi, eta) for eta in _GP for xi in _GP]
    N = np.empty((4, 4))
    dNdx = np.empty((4, 4))
    dNdy = np.empty((4, 4))
    for q, (xi, eta) in enumerate(pts):
        sx, sy = signs[:, 0], signs[:, 1]
        N[q] = 0.25 * (1 + sx * xi) * (1 + sy * eta)
        dNdx[q] = 0.25 * sx * (1 + sy * eta) * (2.0 / dx)
        dNdy[q] = 0.25 * sy * (1 + sx * xi) * (2.0 / dy)
    w = np.full(4, dx * dy / 4.0)
    return N, dNdx, dNdy, w


def q1_element_matrices(dx, dy):
    """Element stiffness and consistent mass for a dx-by-dy rectangle."""
    N, dNdx, dNdy, w = q1_quadrature(dx, dy)
    Ke = np.zeros((4, 4))
    Me = np.zeros((4, 4))
    for q in range(4):
        Ke += w[q] * (np.outer(dNdx[q], dNdx[q]) + np.outer(dNdy[q], dNdy[q]))
        Me += w[q] * np.outer(N[q], N[q])
    return Ke, Me


def _assemble(mesh, elem_mat, elements=None):
    conn = mesh.connectivity if elements is None else mesh.connectivity[elements]
    ne = conn.shape[0]
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    vals = np.tile(elem_mat.ravel(), ne)
    mat = sp.coo_matrix(
        (vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_laplacian_full(mesh, elements=None):
    """Stiffness matrix on all nodes, no boundary conditions applied."""
    Ke, _ = q1_element_matrices(mesh.dx, mesh.dy)
    return SparseMatrix.from_scipy(_assemble(mesh, Ke, elements))


def assemble_mass(mesh, elements=None):
    """Consistent mass matrix on all nodes."""
    _, Me = q1_element_matrices(mesh.dx, mesh.dy)
    return SparseMatrix.from_scipy(_assemble(mesh, Me, elements))


def dof_map_for(mesh, bc):
    """Node-to-equation map; Dirichlet nodes get -1."""
    dof_map = np.full(mesh.n_nodes, -1, dtype=np.int64)
    free = np.ones(mesh.n_nodes, dtype=bool)
    free[bc.nodes] = False
    dof_map[free] = np.arange(free.sum())
    return dof_map


def reduce_operator(K_full, bc, mesh):
    """Eliminate Dirichlet rows and columns from a full-node operator."""
    dof_map = dof_map_for(mesh, bc)
    free = np.flatnonzero(dof_map >= 0)
    mat = K_full.to_scipy()[free][:, free]
    return SparseMatrix.from_scipy(mat), dof_map


def reduce_load(K_full, bc, mesh, f_full):
    """Restrict a full-node load to free equations, lifting Dirichlet data."""
    dof_map = dof_map_for(mesh, bc)
    free = np.flatnonzero(dof_map >= 0)
    f = np.asarray(f_full, dtype=np.float64)[free]
    if len(bc.nodes) and np.any(bc.values != 0.0):
        coupling = K_full.to_scipy()[free][:, bc.nodes]
        f = f - coupling @ bc.values
    return f


def assemble_laplacian(mesh, bc):
    """Dirichlet-eliminated stiffness matrix and the node-to-equation map.

    Requires at least one Dirichlet node, otherwise the operator would be
    singular (constants are in the kernel).
    """
    if len(bc.nodes) == 0:
        raise ContractError(
            "singular operator: no Dirichlet nodes on the pressure grid"
        )
    K_full = assemble_laplacian_full(mesh)
    return reduce_operator(K_full, bc, mesh)


class Partition:
    """Cartesian px-by-py split of the element grid into boxes."""

    def __init__(self, mesh, px, py):
        if mesh.nx % px or mesh.ny % py:
            raise ContractError(
                f"partition {px}x{py} does not divide the {mesh.nx}x{mesh.ny} grid"
            )
        self.px = int(px)
        self.py = int(py)
        self.n_subdomains = self.px * self.py
        self.ex_per = mesh.nx // px
        self.ey_per = mesh.ny // py
        ex = np.tile(np.arange(mesh.nx), mesh.ny)
        ey = np.repeat(np.arange(mesh.ny), mesh.nx)
        self.elem_to_sub = (ey // self.ey_per) * px + ex // self.ex_per
        self._members = [
            np.flatnonzero(self.elem_to_sub == s) for s in range(self.n_subdomains)
        ]

    def elements_of(self, s):
        return self._members[s]


def partition_boxes(mesh, px, py):
    return Partition(mesh, px, py)


def dump_mesh_csv(mesh, path):
    with open(path, "w") as fh:
        fh.write("node,x,y\n")
        for n in range(mesh.n_nodes):
            fh.write(f"{n},{float(mesh.node_x[n])!r},{float(mesh.node_y[n])!r}\n")


def dump_partition_csv(partition, path):
    with open(path, "w") as fh:
        fh.write("element,subdomain\n")
        for e, s in enumerate(partition.elem_to_sub):
            fh.write(f"{e},{s}\n")
