"""P1 Lagrange assembly, sparse SPD solves, and mesh-to-mesh interpolation.

All element integrals are exact for products of P1 functions; spatially
varying coefficients enter through ``exp`` of the P1 interpolant evaluated
at the simplex centroid (one-point quadrature), which keeps the assembled
operators differentiable in the nodal coefficient values.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SIDE, TOP, OutOfDomainError, locate_point

DIRECT_SOLVER_LIMIT = 40_000


class NumericalError(RuntimeError):
    """A linear-algebra operation failed (singular or indefinite system)."""


def _simplex_geometry(nodes, cells):
    """Volumes and P1 basis gradients per cell.

    Returns (vols (m,), grads (m, d+1, d)) where grads[c, i] is the constant
    gradient of basis function i on cell c.
    """
    coords = nodes[cells]
    d = nodes.shape[1]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    if d == 1:
        dets = edges[:, 0, 0]
        inv = 1.0 / edges[:, :, 0][:, :, None]
    else:
        dets = np.linalg.det(edges)
        inv = np.linalg.inv(edges)
    fact = 1
    for k in range(2, d + 1):
        fact *= k
    vols = dets / fact
    grads_rest = np.transpose(inv, (0, 2, 1))
    grads0 = -grads_rest.sum(axis=1, keepdims=True)
    grads = np.concatenate([grads0, grads_rest], axis=1)
    return vols, grads


def _scatter(cells, local, n):
    nv = cells.shape[1]
    rows = np.repeat(cells, nv, axis=1).ravel()
    cols = np.tile(cells, (1, nv)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def _local_mass(vols, nv):
    base = (np.ones((nv, nv)) + np.eye(nv)) / ((nv) * (nv + 1))
    return vols[:, None, None] * base[None, :, :]


def assemble_mass(mesh):
    """Mass matrix M_ij = integral(phi_i phi_j), exact for P1."""
    vols, _ = _simplex_geometry(mesh.nodes, mesh.cells)
    local = _local_mass(vols, mesh.dim + 1)
    return _scatter(mesh.cells, local, mesh.n_nodes)


def assemble_stiffness(mesh, log_coeff=None, tensor=None):
    """Stiffness matrix of -div(c grad u) with c = exp(P1(log_coeff)) at the
    cell centroid; ``tensor`` (d x d SPD) replaces the isotropic identity."""
    vols, grads = _simplex_geometry(mesh.nodes, mesh.cells)
    if tensor is None:
        gg = np.einsum("cid,cjd->cij", grads, grads)
    else:
        tensor = np.asarray(tensor, dtype=float)
        gg = np.einsum("cid,de,cje->cij", grads, tensor, grads)
    if log_coeff is not None:
        log_coeff = np.asarray(log_coeff, dtype=float)
        if log_coeff.shape != (mesh.n_nodes,):
            raise ValueError(
                f"coefficient has length {log_coeff.shape}, mesh has {mesh.n_nodes} nodes"
            )
        coeff = np.exp(log_coeff[mesh.cells].mean(axis=1))
    else:
        coeff = np.ones(mesh.n_cells)
    local = (coeff * vols)[:, None, None] * gg
    return _scatter(mesh.cells, local, mesh.n_nodes)


def _facet_geometry(nodes, facets):
    """Measures of boundary facets embedded in the mesh's coordinates."""
    if facets.shape[1] == 1:
        return np.ones(facets.shape[0])
    coords = nodes[facets]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    gram = np.einsum("fid,fjd->fij", edges, edges)
    if edges.shape[1] == 1:
        dets = gram[:, 0, 0]
    else:
        dets = np.linalg.det(gram)
    fact = 1
    for k in range(2, facets.shape[1]):
        fact *= k
    return np.sqrt(dets) / fact


def facet_mass_blocks(nodes, facets, log_coeff=None):
    """Per-facet P1 mass blocks, optionally scaled by exp(centroid coeff)."""
    nv = facets.shape[1]
    meas = _facet_geometry(nodes, facets)
    if log_coeff is not None:
        meas = meas * np.exp(np.asarray(log_coeff, dtype=float)[facets].mean(axis=1))
    if nv == 1:
        return meas[:, None, None]
    base = (np.ones((nv, nv)) + np.eye(nv)) / (nv * (nv + 1))
    return meas[:, None, None] * base[None, :, :]


def assemble_boundary_mass(mesh, tag=None, log_coeff=None):
    """Boundary mass matrix over facets with ``tag`` (all facets if None)."""
    facets = mesh.boundary_facets if tag is None else mesh.facets_with_tag(tag)
    local = facet_mass_blocks(mesh.nodes, facets, log_coeff)
    return _scatter(facets, local, mesh.n_nodes)


def assemble_robin_mass(mesh, bottom_mesh, beta):
    """Robin boundary matrix integral(exp(beta) phi_i phi_j) over the bottom
    surface, returned in volume-mesh indices via the bottom trace."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (bottom_mesh.n_nodes,):
        raise ValueError(
            f"beta has length {beta.shape}, bottom surface has {bottom_mesh.n_nodes} nodes"
        )
    local = facet_mass_blocks(bottom_mesh.nodes, bottom_mesh.cells, beta)
    vol_cells = mesh.bottom_trace[bottom_mesh.cells]
    return _scatter(vol_cells, local, mesh.n_nodes)


def assemble_flux_load(mesh, g):
    """Load vector integral(g phi_i) over the top surface; ``g`` is a
    volume nodal field of which only top-surface values are read."""
    g = np.asarray(g, dtype=float)
    facets = mesh.facets_with_tag(TOP)
    local = facet_mass_blocks(mesh.nodes, facets)
    load = np.zeros(mesh.n_nodes)
    contrib = np.einsum("fij,fj->fi", local, g[facets])
    np.add.at(load, facets, contrib)
    return load


def assemble_source_load(mesh, f):
    """Volume load M @ f for a nodal source field (used only in tests; the
    production model has no volumetric source)."""
    return assemble_mass(mesh) @ np.asarray(f, dtype=float)


def free_nodes(mesh):
    """Volume nodes not constrained by the homogeneous side Dirichlet
    condition."""
    side = mesh.nodes_with_tag(SIDE)
    mask = np.ones(mesh.n_nodes, dtype=bool)
    mask[side] = False
    return np.flatnonzero(mask)


class SpdSolver:
    """Factorized solver for a sparse SPD system.

    A direct factorization is kept for dimensions up to ``direct_limit``;
    larger systems fall back to diagonally preconditioned CG.  Instances
    are reused across the forward/adjoint/incremental solves that share an
    operator.
    """

    def __init__(self, A, direct_limit=DIRECT_SOLVER_LIMIT, cg_tol=1e-12, name="solve"):
        self.n = A.shape[0]
        self.name = name
        diag = A.diagonal()
        if np.any(diag <= 0):
            raise NumericalError(f"{name}: non-positive diagonal, matrix is not SPD")
        if self.n <= direct_limit:
            try:
                self._lu = spla.splu(A.tocsc())
            except RuntimeError as exc:
                raise NumericalError(f"{name}: factorization failed: {exc}") from exc
            self._cg = None
        else:
            self._lu = None
            self._A = A.tocsr()
            self._precond = spla.LinearOperator(
                A.shape, matvec=lambda v: v / diag
            )
            self._cg_tol = cg_tol

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._lu is not None:
            x = self._lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"{self.name}: factorization produced non-finite values")
            return x
        if b.ndim == 1:
            return self._solve_cg(b)
        return np.column_stack([self._solve_cg(col) for col in b.T])

    def _solve_cg(self, b):
        x, info = spla.cg(self._A, b, rtol=self._cg_tol, atol=0.0, M=self._precond)
        if info != 0:
            raise NumericalError(f"{self.name}: CG did not converge (info={info})")
        return x


def solve_spd(A, b, direct_limit=DIRECT_SOLVER_LIMIT, name="solve_spd"):
    """One-shot SPD solve; see :class:`SpdSolver` for the strategy."""
    return SpdSolver(A, direct_limit=direct_limit, name=name).solve(b)


def evaluate_field(mesh, values, points, tol=1e-12):
    """P1 evaluation of a nodal field at arbitrary points inside the mesh."""
    values = np.asarray(values, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(points.shape[0])
    for k, p in enumerate(points):
        cell, lam = locate_point(mesh, p, tol=tol)
        out[k] = values[mesh.cells[cell]] @ lam
    return out


def interpolate_field(src_mesh, values, dst_mesh, tol=1e-12):
    """Transfer a nodal field between meshes by P1 interpolation."""
    return evaluate_field(src_mesh, values, dst_mesh.nodes, tol=tol)
