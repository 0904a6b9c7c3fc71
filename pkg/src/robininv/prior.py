"""Gaussian field priors built from a squared inverse elliptic operator.

The precision is the square of the operator assembled from

    alpha * (gamma-weighted stiffness + mass) + kappa * boundary mass,

optionally wrapped in a diagonal weight that makes the pointwise variance
exactly flat across the domain (the ``weighted`` variant).  Field algebra
is carried out in the mass-weighted inner product <y, z>_M = y^T M z; the
covariance factor is L = W K^{-1} M so that Gamma = L L* is self-adjoint
in that product even for non-constant weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem
from .mesh import SlabMesh

NEUMANN = "neumann"
DIRICHLET = "dirichlet"
ROBIN = "robin"
WEIGHTED = "weighted"

VARIANTS = (NEUMANN, DIRICHLET, ROBIN, WEIGHTED)

# Above this node count the white-noise factor switches from a dense
# Cholesky of M to diagonal mass lumping.
DENSE_NOISE_LIMIT = 5_000


def marginal_sigma(alpha, gamma, dim):
    """Target marginal standard deviation of the weighted prior.

    ``gamma`` may be a scalar or an SPD matrix; matrices are reduced to the
    geometric mean of their eigenvalues.  ``dim`` is the dimension of the
    parameter's own domain.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 2:
        gamma_scalar = float(np.linalg.det(gamma)) ** (1.0 / gamma.shape[0])
    else:
        gamma_scalar = float(gamma)
    nu = 2.0 - dim / 2.0
    return math.gamma(nu) / ((4.0 * math.pi) ** (dim / 2.0) * gamma_scalar**nu * alpha**2)


@dataclass
class EllipticPrior:
    """Assembled Gaussian prior on a mesh; see :func:`assemble_prior`."""

    mesh: SlabMesh
    alpha: float
    gamma: np.ndarray
    kappa: float
    bc_variant: str
    mean: np.ndarray
    K: object
    M: object
    weight: np.ndarray
    sigma: float
    free: np.ndarray  # all nodes except for the dirichlet variant
    white_noise_method: str = "dense_cholesky"
    _k_solver: object = field(default=None, repr=False)
    _m_solver: object = field(default=None, repr=False)
    _noise_factor: object = field(default=None, repr=False)
    _unweighted_var: object = field(default=None, repr=False)

    @property
    def n(self):
        return self.mesh.n_nodes

    # -- linear algebra helpers -------------------------------------------

    def _solve_k(self, b):
        b = np.asarray(b, dtype=float)
        if self.free.size == self.n:
            return self._k_solver.solve(b)
        out = np.zeros_like(b)
        out[self.free] = self._k_solver.solve(b[self.free])
        return out

    def _wmul(self, x):
        w = self.weight if x.ndim == 1 else self.weight[:, None]
        return w * x

    def apply_L(self, z):
        """Covariance factor L z = W K^{-1} M z."""
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.n:
            raise ValueError(f"expected length {self.n}, got {z.shape}")
        return self._wmul(self._solve_k(self.M @ z))

    def apply_Lstar(self, z):
        """M-adjoint factor L* z = K^{-1} W M z."""
        z = np.asarray(z, dtype=float)
        return self._solve_k(self._wmul(self.M @ z))

    def apply_L_inv(self, x):
        self._require_invertible("apply_L_inv")
        return self._m_solver.solve(self.K @ (np.asarray(x, dtype=float) / self.weight))

    def apply_Lstar_inv(self, x):
        self._require_invertible("apply_Lstar_inv")
        return self._m_solver.solve((self.K @ np.asarray(x, dtype=float)) / self.weight)

    def apply_covariance(self, z):
        """Gamma z = L L* z."""
        return self.apply_L(self.apply_Lstar(z))

    def apply_precision(self, x):
        """Gamma^{-1} x = L^{-*} L^{-1} x."""
        return self.apply_Lstar_inv(self.apply_L_inv(x))

    def _require_invertible(self, op):
        if self.bc_variant == DIRICHLET:
            raise ValueError(
                f"{op}: the dirichlet variant has a singular covariance; "
                "precision-side operations are unsupported"
            )

    # -- sampling ----------------------------------------------------------

    def white_noise(self, rng):
        """Draw M-white noise (nodal covariance M^{-1})."""
        zeta = rng.standard_normal(self.n)
        if self._noise_factor is None:
            self._build_noise_factor()
        if self.white_noise_method == "dense_cholesky":
            return sla.solve_triangular(self._noise_factor, zeta, lower=False)
        return zeta / self._noise_factor

    def _build_noise_factor(self):
        if self.n <= DENSE_NOISE_LIMIT:
            self._noise_factor = np.linalg.cholesky(self.M.toarray()).T
            self.white_noise_method = "dense_cholesky"
        else:
            lumped = np.asarray(self.M.sum(axis=1)).ravel()
            self._noise_factor = np.sqrt(lumped)
            self.white_noise_method = "lumped"

    def sample(self, seed):
        """Draw mean + L w with w M-white noise; deterministic given seed."""
        rng = np.random.default_rng(seed)
        return self.mean + self.apply_L(self.white_noise(rng))

    # -- cost / gradient ---------------------------------------------------

    def cost_and_grad(self, x):
        """Quadratic cost 0.5 <Gamma^{-1}(x - mean), x - mean>_M and its
        M-weighted gradient Gamma^{-1}(x - mean)."""
        self._require_invertible("cost_and_grad")
        e = np.asarray(x, dtype=float) - self.mean
        t = self.K @ (e / self.weight)
        v = self._m_solver.solve(t)
        cost = 0.5 * float(t @ v)
        grad = self._m_solver.solve((self.K @ v) / self.weight)
        return cost, grad

    # -- pointwise variance --------------------------------------------------

    def unweighted_pointwise_variance(self):
        """Diagonal c_i of K^{-1} M K^{-1}: nodal variance of the prior
        before any weighting.  Exact; dense in the number of nodes."""
        if self._unweighted_var is None:
            cols = np.zeros((self.n, self.free.size))
            cols[self.free] = self._k_solver.solve(np.eye(self.free.size))
            mx = self.M @ cols
            c = np.zeros(self.n)
            c[self.free] = np.einsum("ij,ij->j", cols, mx)
            self._unweighted_var = c
        return self._unweighted_var

    def pointwise_variance(self):
        return self.weight**2 * self.unweighted_pointwise_variance()


def compute_variance_weight(prior):
    """Diagonal weight w_i = sigma / sqrt(c_i) making the pointwise prior
    variance equal sigma^2 at every node."""
    c = prior.unweighted_pointwise_variance()
    if np.any(c <= 0):
        bad = int(np.argmin(c))
        raise fem.NumericalError(
            f"variance weight: nonpositive unweighted variance {c[bad]!r} at node {bad}"
        )
    return prior.sigma / np.sqrt(c)


def assemble_prior(mesh, alpha, gamma, kappa, mean, bc_variant):
    """Assemble the prior operator and its covariance machinery.

    ``gamma`` may be given as a scalar (isotropic) or a d x d SPD matrix.
    The dirichlet variant pins boundary nodes of the parameter domain to
    the mean; the weighted variant computes the flattening weight from the
    exact unweighted pointwise variance.
    """
    if bc_variant not in VARIANTS:
        raise ValueError(f"unknown bc_variant {bc_variant!r}; expected one of {VARIANTS}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if kappa < 0:
        raise ValueError(f"kappa must be nonnegative, got {kappa}")
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gamma = float(gamma) * np.eye(mesh.dim)
    if gamma.shape != (mesh.dim, mesh.dim):
        raise ValueError(f"gamma must be {mesh.dim}x{mesh.dim}, got {gamma.shape}")
    if not np.allclose(gamma, gamma.T) or np.any(np.linalg.eigvalsh(gamma) <= 0):
        raise ValueError("gamma must be symmetric positive definite")

    M = fem.assemble_mass(mesh)
    K = alpha * (fem.assemble_stiffness(mesh, tensor=gamma) + M)
    if bc_variant == ROBIN and kappa > 0:
        K = K + kappa * fem.assemble_boundary_mass(mesh)
    K = K.tocsr()

    mean = np.asarray(mean, dtype=float)
    if mean.ndim == 0:
        mean = np.full(mesh.n_nodes, float(mean))

    if bc_variant == DIRICHLET:
        boundary = np.unique(mesh.boundary_facets)
        mask = np.ones(mesh.n_nodes, dtype=bool)
        mask[boundary] = False
        free = np.flatnonzero(mask)
        k_solver = fem.SpdSolver(K[free][:, free].tocsc(), name="prior operator")
    else:
        free = np.arange(mesh.n_nodes)
        k_solver = fem.SpdSolver(K, name="prior operator")

    prior = EllipticPrior(
        mesh=mesh,
        alpha=float(alpha),
        gamma=gamma,
        kappa=float(kappa),
        bc_variant=bc_variant,
        mean=mean,
        K=K,
        M=M,
        weight=np.ones(mesh.n_nodes),
        sigma=marginal_sigma(alpha, gamma, mesh.dim),
        free=free,
        _k_solver=k_solver,
        _m_solver=fem.SpdSolver(M, name="prior mass"),
    )
    if bc_variant == WEIGHTED:
        prior.weight = compute_variance_weight(prior)
    return prior
