"""Parameter-to-observable map and adjoint-based derivative machinery.

The forward problem is the Poisson equation -div(exp(a) grad u) = 0 with a
prescribed flux on the top surface, exp(beta) u impedance on the bottom
surface, and homogeneous Dirichlet sides.  For fixed conductivity the map
beta -> observations is differentiated by the adjoint method: the misfit
gradient costs one forward and one adjoint solve, each Gauss-Newton
Hessian action costs one incremental forward and one incremental adjoint
solve, and all four solves at a given beta share one factorization.

Assembled (Euclidean) gradient and Hessian-action vectors are returned;
callers working in the mass-weighted inner product apply the inverse
bottom-surface mass, and add the prior term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import fem
from .mesh import SlabMesh


@dataclass
class SolveCounter:
    """Running tally of Poisson solves by kind."""

    forward: int = 0
    adjoint: int = 0
    incr_forward: int = 0
    incr_adjoint: int = 0

    @property
    def total(self):
        return self.forward + self.adjoint + self.incr_forward + self.incr_adjoint

    def as_dict(self):
        return {
            "forward": self.forward,
            "adjoint": self.adjoint,
            "incr_forward": self.incr_forward,
            "incr_adjoint": self.incr_adjoint,
            "total": self.total,
        }


@dataclass
class ErrorModel:
    """Total-error mean and covariance entering the likelihood.

    Noise-only models carry (0, Gamma_e); the enhanced model adds the
    approximation-error statistics.  ``apply_inv`` and ``whiten`` use a
    cached Cholesky factorization of the covariance.
    """

    mean_shift: np.ndarray
    covariance: np.ndarray
    _chol: object = field(default=None, repr=False)

    def __post_init__(self):
        self.mean_shift = np.asarray(self.mean_shift, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        q = self.mean_shift.size
        if self.covariance.shape != (q, q):
            raise ValueError(
                f"covariance shape {self.covariance.shape} does not match q={q}"
            )
        if not np.all(np.isfinite(self.mean_shift)):
            raise ValueError("mean shift contains non-finite entries")
        try:
            self._chol = sla.cho_factor(self.covariance, lower=True)
        except np.linalg.LinAlgError as exc:
            raise fem.NumericalError(f"error-model covariance is not SPD: {exc}") from exc

    @property
    def q(self):
        return self.mean_shift.size

    @classmethod
    def noise_only(cls, delta, q):
        """Zero-mean iid noise model with standard deviation ``delta``."""
        if delta <= 0:
            raise ValueError(f"noise standard deviation must be positive, got {delta}")
        return cls(np.zeros(q), delta**2 * np.eye(q))

    def apply_inv(self, r):
        return sla.cho_solve(self._chol, np.asarray(r, dtype=float))

    def whiten(self, r):
        return sla.solve_triangular(self._chol[0], np.asarray(r, dtype=float), lower=True)


class ObservationOperator:
    """Pointwise observation of the potential at q top-surface points."""

    def __init__(self, mesh, points, tol=1e-10):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != mesh.dim:
            raise ValueError(f"points must be {mesh.dim}-dimensional")
        height = mesh.lengths[-1]
        off = np.abs(points[:, -1] - height) > tol * max(1.0, height)
        if np.any(off):
            raise ValueError(
                f"observation point {points[np.argmax(off)].tolist()} is not on the top surface"
            )
        rows, cols, vals = [], [], []
        for k, p in enumerate(points):
            cell, lam = fem.locate_point(mesh, p)
            rows.extend([k] * (mesh.dim + 1))
            cols.extend(mesh.cells[cell])
            vals.extend(lam)
        B = sp.coo_matrix((vals, (rows, cols)), shape=(points.shape[0], mesh.n_nodes))
        B.sum_duplicates()
        self.B = B.tocsr()
        self.B.eliminate_zeros()
        self.points = points
        sums = np.asarray(self.B.sum(axis=1)).ravel()
        if not np.allclose(sums, 1.0, atol=1e-10):
            raise fem.NumericalError("observation rows do not sum to one")

    @property
    def q(self):
        return self.points.shape[0]

    def observe(self, u):
        return self.B @ np.asarray(u, dtype=float)


@dataclass
class ForwardState:
    """Forward solution at one beta, with the shared factorization."""

    beta: np.ndarray
    facet_coef: np.ndarray  # exp(beta) at bottom-facet centroids
    u: np.ndarray  # full-length potential, zeros on side nodes
    obs: np.ndarray
    solver: object


class PoissonForwardModel:
    """Forward/adjoint solver bound to a mesh, a conductivity, and a flux."""

    def __init__(self, mesh, bottom_mesh, log_conductivity, flux, obs, label="model",
                 direct_limit=fem.DIRECT_SOLVER_LIMIT):
        self.mesh = mesh
        self.bottom_mesh = bottom_mesh
        self.obs = obs
        self.label = label
        self.counter = SolveCounter()
        self._direct_limit = direct_limit
        a = np.asarray(log_conductivity, dtype=float)
        if a.ndim == 0:
            a = np.full(mesh.n_nodes, float(a))
        if not np.all(np.isfinite(a)):
            raise ValueError("log conductivity contains non-finite values")
        self.log_conductivity = a
        self.K = fem.assemble_stiffness(mesh, log_coeff=a)
        g = np.asarray(flux, dtype=float)
        if g.ndim == 0:
            g = np.full(mesh.n_nodes, float(g))
        self.load = fem.assemble_flux_load(mesh, g)
        self.free = fem.free_nodes(mesh)
        # bottom-facet bookkeeping reused by every boundary assembly
        self._facets = bottom_mesh.cells
        self._facet_masses = fem.facet_mass_blocks(bottom_mesh.nodes, self._facets)
        self._facets_vol = mesh.bottom_trace[self._facets]
        self._nv = self._facets.shape[1]

    # -- assembly helpers ---------------------------------------------------

    def _facet_coef(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.bottom_mesh.n_nodes,):
            raise ValueError(
                f"beta has shape {beta.shape}, bottom surface has "
                f"{self.bottom_mesh.n_nodes} nodes"
            )
        return np.exp(beta[self._facets].mean(axis=1))

    def _robin_matrix(self, coef):
        local = coef[:, None, None] * self._facet_masses
        nv = self._nv
        rows = np.repeat(self._facets_vol, nv, axis=1).ravel()
        cols = np.tile(self._facets_vol, (1, nv)).ravel()
        n = self.mesh.n_nodes
        return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def _boundary_gradient(self, coef, u, p):
        """Assembled vector with entries d/d(beta_i) of the Robin bilinear
        form p^T R(beta) u, on bottom-surface nodes."""
        s = np.einsum("fi,fij,fj->f", p[self._facets_vol], self._facet_masses,
                      u[self._facets_vol])
        out = np.zeros(self.bottom_mesh.n_nodes)
        np.add.at(out, self._facets, (coef * s / self._nv)[:, None])
        return out

    def _robin_source(self, coef, v, u):
        """(dR/dbeta . v) u, the incremental-forward boundary source."""
        vbar = np.asarray(v, dtype=float)[self._facets].mean(axis=1)
        contrib = (coef * vbar)[:, None] * np.einsum(
            "fij,fj->fi", self._facet_masses, u[self._facets_vol]
        )
        out = np.zeros(self.mesh.n_nodes)
        np.add.at(out, self._facets_vol, contrib)
        return out

    def _scatter_free(self, x_free):
        out = np.zeros(self.mesh.n_nodes)
        out[self.free] = x_free
        return out

    # -- the four Poisson problems -------------------------------------------

    def solve_forward(self, beta):
        """Solve the forward problem at ``beta``; counts one forward solve."""
        coef = self._facet_coef(beta)
        S = (self.K + self._robin_matrix(coef))[self.free][:, self.free]
        solver = fem.SpdSolver(S.tocsc(), direct_limit=self._direct_limit,
                               name=f"{self.label}: forward operator")
        u = self._scatter_free(solver.solve(self.load[self.free]))
        self.counter.forward += 1
        return ForwardState(
            beta=np.array(beta, dtype=float),
            facet_coef=coef,
            u=u,
            obs=self.obs.observe(u),
            solver=solver,
        )

    def observe(self, state):
        return state.obs

    def misfit_cost(self, state, d_obs, err):
        res = state.obs - d_obs + err.mean_shift
        w = err.whiten(res)
        return 0.5 * float(w @ w)

    def misfit_gradient(self, state, d_obs, err):
        """Misfit cost and its assembled gradient (adjoint method).

        Counts one adjoint solve; the forward solve is the one cached in
        ``state``.  The prior term is added by the caller.
        """
        res = state.obs - d_obs + err.mean_shift
        weighted = err.apply_inv(res)
        rhs = -(self.obs.B.T @ weighted)
        p = self._scatter_free(state.solver.solve(rhs[self.free]))
        self.counter.adjoint += 1
        grad = self._boundary_gradient(state.facet_coef, state.u, p)
        return 0.5 * float(res @ weighted), grad

    def gn_hessian_action(self, state, beta_hat, err):
        """Assembled Gauss-Newton misfit Hessian action F* Gamma^{-1} F v.

        Counts one incremental forward and one incremental adjoint solve;
        the prior term is added by the caller.
        """
        u_hat = self._incremental_forward(state, beta_hat)
        w = err.apply_inv(self.obs.observe(u_hat))
        rhs = -(self.obs.B.T @ w)
        p_hat = self._scatter_free(state.solver.solve(rhs[self.free]))
        self.counter.incr_adjoint += 1
        return self._boundary_gradient(state.facet_coef, state.u, p_hat)

    def linearized_obs_action(self, state, beta_hat):
        """F v = B u_hat via the incremental forward problem."""
        return self.obs.observe(self._incremental_forward(state, beta_hat))

    def obs_adjoint_action(self, state, w):
        """Assembled F* w via one adjoint solve with source -B^T w."""
        rhs = -(self.obs.B.T @ np.asarray(w, dtype=float))
        p = self._scatter_free(state.solver.solve(rhs[self.free]))
        self.counter.adjoint += 1
        return self._boundary_gradient(state.facet_coef, state.u, p)

    def _incremental_forward(self, state, beta_hat):
        rhs = -self._robin_source(state.facet_coef, beta_hat, state.u)
        u_hat = self._scatter_free(state.solver.solve(rhs[self.free]))
        self.counter.incr_forward += 1
        return u_hat
