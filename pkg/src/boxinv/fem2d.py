"""P1/P0 finite elements on a structured triangulation of (-1,1)^2.

The square is subdivided into N x N grid squares, each split along its
lower-left-to-upper-right diagonal.  Nodes on x = +-1 carry homogeneous
Dirichlet conditions and are eliminated from the unknowns; the edges
y = +-1 are homogeneous Neumann.  All element integrals of P0*P1*P1 and
P0*grad(P1).grad(P1) products are polynomial and computed in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .errors import DimensionMismatch, IncompatibleMeshes, UnknownDescriptor
from .linalg import SymMatrix


@dataclass(frozen=True)
class StructuredMesh:
    N: int
    nodes: np.ndarray        # (n_nodes, 2)
    triangles: np.ndarray    # (2N^2, 3) vertex indices
    dirichlet: np.ndarray    # bool per node (x = +-1)
    free_nodes: np.ndarray   # indices of non-Dirichlet nodes
    free_map: np.ndarray     # node -> position in free_nodes, -1 if Dirichlet
    areas: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)  # (ntri, 3, 2)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def n_free(self):
        return self.free_nodes.shape[0]

    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)


def build_mesh(N: int) -> StructuredMesh:
    """Uniform triangulation; each square split lower-left to upper-right."""
    if N < 2:
        raise ValueError("N must be >= 2")
    coords = -1.0 + 2.0 * np.arange(N + 1) / N
    xg, yg = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])

    def idx(i, j):
        return j * (N + 1) + i

    tris = np.empty((2 * N * N, 3), dtype=int)
    t = 0
    for j in range(N):
        for i in range(N):
            ll, lr = idx(i, j), idx(i + 1, j)
            ul, ur = idx(i, j + 1), idx(i + 1, j + 1)
            tris[t] = (ll, lr, ur)       # lower triangle
            tris[t + 1] = (ll, ur, ul)   # upper triangle
            t += 2

    dirichlet = np.isclose(np.abs(nodes[:, 0]), 1.0)
    free_nodes = np.flatnonzero(~dirichlet)
    free_map = -np.ones(nodes.shape[0], dtype=int)
    free_map[free_nodes] = np.arange(free_nodes.size)

    p = nodes[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    areas = 0.5 * np.abs(det)
    # gradients of the three barycentric basis functions
    grads = np.empty((tris.shape[0], 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -(grads[:, 1] + grads[:, 2])

    return StructuredMesh(N=N, nodes=nodes, triangles=tris,
                          dirichlet=dirichlet, free_nodes=free_nodes,
                          free_map=free_map, areas=areas, grads=grads)


def _accumulate(mesh, local):
    """Scatter per-element 3x3 blocks into a CSR SymMatrix over all nodes."""
    tris = mesh.triangles
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    return SymMatrix(mat, check_symmetry=False)


def assemble_stiffness(mesh: StructuredMesh, a=None) -> SymMatrix:
    """Weighted stiffness: (i,j) -> sum_T a_T |T| grad(phi_i).grad(phi_j)."""
    coef = np.ones(mesh.n_triangles) if a is None else np.asarray(a, float)
    gg = np.einsum("tid,tjd->tij", mesh.grads, mesh.grads)
    local = (coef * mesh.areas)[:, None, None] * gg
    return _accumulate(mesh, local)


_MASS_REF = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0


def assemble_weighted_mass(mesh: StructuredMesh, c) -> SymMatrix:
    """Weighted mass: (i,j) -> sum_T c_T integral_T phi_i phi_j."""
    coef = np.asarray(c, dtype=float)
    local = (coef * mesh.areas)[:, None, None] * _MASS_REF[None]
    return _accumulate(mesh, local)


def assemble_mass_p1(mesh: StructuredMesh) -> SymMatrix:
    return assemble_weighted_mass(mesh, np.ones(mesh.n_triangles))


def assemble_cell_coupling_mass(mesh: StructuredMesh, phik):
    """Rectangular (nodes x triangles): column T holds integral_T phik phi_j.

    Applied to a cell field c this gives the load integral c phik phi_. .
    """
    phik = np.asarray(phik, dtype=float)
    pvals = phik[mesh.triangles]                       # (ntri, 3)
    colvals = mesh.areas[:, None] * (pvals @ _MASS_REF)  # (ntri, 3)
    rows = mesh.triangles.ravel()
    cols = np.repeat(np.arange(mesh.n_triangles), 3)
    return sp.coo_matrix((colvals.ravel(), (rows, cols)),
                         shape=(mesh.n_nodes, mesh.n_triangles)).tocsr()


def assemble_cell_coupling_stiffness(mesh: StructuredMesh, phik):
    """Rectangular (nodes x triangles): column T holds |T| grad(phik).grad(phi_j)."""
    phik = np.asarray(phik, dtype=float)
    pvals = phik[mesh.triangles]
    gk = np.einsum("ti,tid->td", pvals, mesh.grads)     # grad of phik per cell
    colvals = mesh.areas[:, None] * np.einsum("td,tjd->tj", gk, mesh.grads)
    rows = mesh.triangles.ravel()
    cols = np.repeat(np.arange(mesh.n_triangles), 3)
    return sp.coo_matrix((colvals.ravel(), (rows, cols)),
                         shape=(mesh.n_nodes, mesh.n_triangles)).tocsr()


def restrict_to_free(obj, mesh: StructuredMesh):
    """Select free-node rows (and columns for symmetric matrices)."""
    fr = mesh.free_nodes
    if isinstance(obj, SymMatrix):
        if obj.n != mesh.n_nodes:
            raise DimensionMismatch(f"{obj.n} vs {mesh.n_nodes}")
        return linalg.extract_principal_submatrix(obj, fr)
    arr = np.asarray(obj, dtype=float)
    if arr.shape[0] != mesh.n_nodes:
        raise DimensionMismatch(f"{arr.shape[0]} vs {mesh.n_nodes}")
    return arr[fr]


def prolong_free(v_free, mesh: StructuredMesh):
    """Embed a free-node vector as a nodal field, zero on Dirichlet nodes."""
    v_free = np.asarray(v_free, dtype=float)
    if v_free.shape[0] != mesh.n_free:
        raise DimensionMismatch(f"{v_free.shape[0]} vs {mesh.n_free}")
    out = np.zeros(mesh.n_nodes)
    out[mesh.free_nodes] = v_free
    return out


def vstar_norm_sq(r_free, kfact) -> float:
    """Dual-norm square r' K_free^{-1} r of a free-node residual."""
    r_free = np.asarray(r_free, dtype=float)
    return float(r_free @ linalg.solve(kfact, r_free))


def _check_pair(fine: StructuredMesh, coarse: StructuredMesh):
    if fine.N != 2 * coarse.N:
        raise IncompatibleMeshes(f"fine N={fine.N} is not twice coarse N={coarse.N}")


def prolongation_matrix(fine: StructuredMesh, coarse: StructuredMesh):
    """Sparse P1 interpolation operator from coarse to fine nodal values."""
    _check_pair(fine, coarse)
    Nc = coarse.N
    nf = fine.N + 1

    def cidx(i, j):
        return j * (Nc + 1) + i

    rows, cols, vals = [], [], []
    for jf in range(nf):
        for if_ in range(nf):
            r = jf * nf + if_
            i2, ri = divmod(if_, 2)
            j2, rj = divmod(jf, 2)
            if ri == 0 and rj == 0:
                rows.append(r); cols.append(cidx(i2, j2)); vals.append(1.0)
            elif ri == 1 and rj == 0:
                for c in (cidx(i2, j2), cidx(i2 + 1, j2)):
                    rows.append(r); cols.append(c); vals.append(0.5)
            elif ri == 0 and rj == 1:
                for c in (cidx(i2, j2), cidx(i2, j2 + 1)):
                    rows.append(r); cols.append(c); vals.append(0.5)
            else:
                # center of a coarse square sits on the split diagonal
                for c in (cidx(i2, j2), cidx(i2 + 1, j2 + 1)):
                    rows.append(r); cols.append(c); vals.append(0.5)
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(fine.n_nodes, coarse.n_nodes)).tocsr()


def prolong_nodal(v_coarse, fine: StructuredMesh, coarse: StructuredMesh):
    return prolongation_matrix(fine, coarse) @ np.asarray(v_coarse, float)


def restrict_nodal(v_fine, fine: StructuredMesh, coarse: StructuredMesh):
    """Pointwise sampling of a fine nodal field at the coarse nodes."""
    _check_pair(fine, coarse)
    v_fine = np.asarray(v_fine, dtype=float)
    nf = fine.N + 1
    grid = v_fine.reshape(nf, nf)
    return grid[::2, ::2].ravel()


def project_cells(c_fine, fine: StructuredMesh, coarse: StructuredMesh):
    """Average the four fine triangles inside each coarse triangle."""
    _check_pair(fine, coarse)
    c_fine = np.asarray(c_fine, dtype=float)
    Nc = coarse.N
    Nf = fine.N

    def ftri(i, j, upper):
        return 2 * (j * Nf + i) + (1 if upper else 0)

    out = np.empty(coarse.n_triangles)
    for j in range(Nc):
        for i in range(Nc):
            fi, fj = 2 * i, 2 * j
            low = [ftri(fi, fj, False), ftri(fi + 1, fj, False),
                   ftri(fi + 1, fj, True), ftri(fi + 1, fj + 1, False)]
            up = [ftri(fi, fj, True), ftri(fi, fj + 1, False),
                  ftri(fi, fj + 1, True), ftri(fi + 1, fj + 1, True)]
            s = j * Nc + i
            out[2 * s] = c_fine[low].mean()
            out[2 * s + 1] = c_fine[up].mean()
    return out


# built-in coefficient/state descriptors used by the shipped experiments

def _disk(cx, cy, r):
    r2 = r * r

    def f(x, y):
        return ((x - cx) ** 2 + (y - cy) ** 2 <= r2).astype(float)

    return f


_B = _disk(-0.4, -0.3, 0.2)
_B1 = _disk(-0.4, -0.3, 0.2)
_B2 = _disk(0.5, 0.5, 0.1)

_DESCRIPTORS = {
    "test1": lambda x, y: 1.0 + 10.0 * _B(x, y),
    "test2": lambda x, y: 1.0 - 10.0 * _B1(x, y) + 5.0 * _B2(x, y),
    "test3": lambda x, y: -10.0 * _B1(x, y) - 5.0 * _B2(x, y),
    "exact_state": lambda x, y: np.cos(0.5 * np.pi * x) * np.sin(0.5 * np.pi * y),
}


def sample_coefficient(expr: str, mesh: StructuredMesh, target: str):
    """Evaluate a built-in descriptor on cell centroids (P0) or nodes (P1)."""
    if expr not in _DESCRIPTORS:
        raise UnknownDescriptor(expr)
    f = _DESCRIPTORS[expr]
    if target == "P0":
        c = mesh.centroids()
        return f(c[:, 0], c[:, 1])
    if target == "P1":
        return f(mesh.nodes[:, 0], mesh.nodes[:, 1])
    raise UnknownDescriptor(f"target {target!r}")


def dump_field(values, mesh: StructuredMesh, path):
    """Plain-text dump: header 'P0 N' or 'P1 N', then row-major values."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] == mesh.n_triangles:
        kind = "P0"
    elif values.shape[0] == mesh.n_nodes:
        kind = "P1"
    else:
        raise DimensionMismatch(f"field length {values.shape[0]}")
    with open(path, "w") as fh:
        fh.write(f"{kind} {mesh.N}\n")
        fh.write("\n".join(repr(float(v)) for v in values) + "\n")


def load_field(path):
    """Read a field dump; returns (kind, N, values)."""
    with open(path) as fh:
        header = fh.readline().split()
        kind, N = header[0], int(header[1])
        values = np.array([float(t) for t in fh.read().split()])
    return kind, N, values
