"""Prior covariance algebra, variance weighting, and sampling."""

import math

import numpy as np
import pytest

from robininv import fem
from robininv.mesh import build_slab_mesh, extract_bottom_mesh
from robininv.prior import (
    DIRICHLET,
    NEUMANN,
    ROBIN,
    WEIGHTED,
    assemble_prior,
    compute_variance_weight,
    marginal_sigma,
)


@pytest.fixture(scope="module")
def line_mesh():
    """1-D parameter domain (bottom edge of a 2-D slab), 13 nodes."""
    return extract_bottom_mesh(build_slab_mesh(12, 1, 2, 1.0, 0.1, dim=2))


@pytest.fixture(scope="module")
def square_mesh():
    """2-D parameter domain (bottom surface of a 3-D slab), 121 nodes."""
    return extract_bottom_mesh(build_slab_mesh(10, 10, 1, 1.0, 0.01, dim=3))


@pytest.fixture(scope="module")
def weighted_prior(square_mesh):
    return assemble_prior(square_mesh, 7.0, 0.01, 0.0, 1.0, WEIGHTED)


class TestSigma:
    def test_formula_2d(self):
        # nu = 1 on a 2-D parameter domain
        expected = 1.0 / (4.0 * math.pi * 0.01 * 49.0)
        assert marginal_sigma(7.0, 0.01, 2) == pytest.approx(expected, rel=1e-14)

    def test_formula_1d(self):
        expected = math.gamma(1.5) / ((4 * math.pi) ** 0.5 * 0.01**1.5 * 49.0)
        assert marginal_sigma(7.0, 0.01, 1) == pytest.approx(expected, rel=1e-14)

    def test_matrix_gamma_reduces_by_determinant(self):
        iso = marginal_sigma(3.0, 0.04, 2)
        aniso = marginal_sigma(3.0, np.diag([0.08, 0.02]), 2)
        assert aniso == pytest.approx(iso, rel=1e-14)


class TestAssembly:
    def test_invalid_arguments(self, square_mesh):
        with pytest.raises(ValueError):
            assemble_prior(square_mesh, -1.0, 0.01, 0.0, 0.0, NEUMANN)
        with pytest.raises(ValueError):
            assemble_prior(square_mesh, 1.0, np.diag([1.0, -1.0]), 0.0, 0.0, NEUMANN)
        with pytest.raises(ValueError):
            assemble_prior(square_mesh, 1.0, 0.01, 0.0, 0.0, "mystery")

    def test_operator_is_spd(self, square_mesh):
        p = assemble_prior(square_mesh, 7.0, 0.01, 0.0, 1.0, NEUMANN)
        eigs = np.linalg.eigvalsh(p.K.toarray())
        assert eigs.min() > 0


class TestVarianceWeight:
    def test_weighted_variance_is_flat(self, weighted_prior):
        var = weighted_prior.pointwise_variance()
        target = weighted_prior.sigma**2
        assert np.abs(var - target).max() <= 1e-10 * target

    def test_neumann_variance_inflates_at_boundary(self, square_mesh):
        p = assemble_prior(square_mesh, 7.0, 0.01, 0.0, 0.0, NEUMANN)
        var = p.pointwise_variance()
        assert var.max() / var.min() > 1.5

    def test_robin_between_neumann_and_dirichlet(self, square_mesh):
        kappa = 1.42 * math.sqrt(0.01 / 7.0)
        neu = assemble_prior(square_mesh, 7.0, 0.01, 0.0, 0.0, NEUMANN)
        rob = assemble_prior(square_mesh, 7.0, 0.01, kappa, 0.0, ROBIN)
        dir_ = assemble_prior(square_mesh, 7.0, 0.01, 0.0, 0.0, DIRICHLET)
        boundary = np.unique(square_mesh.boundary_facets)
        v_n = neu.pointwise_variance()[boundary].mean()
        v_r = rob.pointwise_variance()[boundary].mean()
        v_d = dir_.pointwise_variance()[boundary].mean()
        assert v_d < v_r < v_n

    def test_weight_formula(self, weighted_prior):
        w = compute_variance_weight(weighted_prior)
        c = weighted_prior.unweighted_pointwise_variance()
        assert np.allclose(w, weighted_prior.sigma / np.sqrt(c), rtol=1e-14)


class TestFactorAlgebra:
    def test_L_roundtrip(self, weighted_prior):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(weighted_prior.n)
        assert np.allclose(weighted_prior.apply_L_inv(weighted_prior.apply_L(z)), z,
                           atol=1e-10)
        assert np.allclose(weighted_prior.apply_Lstar_inv(weighted_prior.apply_Lstar(z)),
                           z, atol=1e-10)

    def test_covariance_self_adjoint_in_mass_product(self, weighted_prior):
        rng = np.random.default_rng(1)
        M = weighted_prior.M
        y, z = rng.standard_normal((2, weighted_prior.n))
        lhs = weighted_prior.apply_covariance(y) @ (M @ z)
        rhs = y @ (M @ weighted_prior.apply_covariance(z))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_unweighted_covariance_matches_dense_oracle(self, line_mesh):
        p = assemble_prior(line_mesh, 7.0, 0.01, 0.0, 0.0, NEUMANN)
        n = p.n
        K = p.K.toarray()
        M = p.M.toarray()
        dense_cov = np.linalg.solve(K, M @ np.linalg.solve(K, M))
        rng = np.random.default_rng(2)
        z = rng.standard_normal(n)
        assert np.allclose(p.apply_covariance(z), dense_cov @ z, atol=1e-10)

    def test_precision_covariance_inverse_pair(self, weighted_prior):
        rng = np.random.default_rng(3)
        z = rng.standard_normal(weighted_prior.n)
        back = weighted_prior.apply_precision(weighted_prior.apply_covariance(z))
        assert np.abs(back - z).max() <= 1e-8 * np.abs(z).max()

    def test_dirichlet_refuses_precision(self, square_mesh):
        p = assemble_prior(square_mesh, 7.0, 0.01, 0.0, 0.0, DIRICHLET)
        with pytest.raises(ValueError, match="dirichlet"):
            p.apply_precision(np.zeros(p.n))


class TestSampling:
    def test_identical_seeds_identical_fields(self, weighted_prior):
        assert np.array_equal(weighted_prior.sample(77), weighted_prior.sample(77))

    def test_moments_match_target(self, line_mesh):
        p = assemble_prior(line_mesh, 7.0, 0.01, 0.0, 1.0, WEIGHTED)
        draws = np.array([p.sample(seed) for seed in range(10_000)])
        mean_err = np.abs(draws.mean(axis=0) - p.mean)
        assert np.all(mean_err <= 4.0 * p.sigma / math.sqrt(10_000))
        var = draws.var(axis=0, ddof=1)
        assert np.all(np.abs(var - p.sigma**2) <= 0.1 * p.sigma**2)

    def test_dirichlet_sample_pinned_at_boundary(self, line_mesh):
        p = assemble_prior(line_mesh, 7.0, 0.01, 0.0, 2.0, DIRICHLET)
        s = p.sample(5)
        boundary = np.unique(line_mesh.boundary_facets)
        assert np.allclose(s[boundary], 2.0, atol=1e-13)


class TestCostAndGrad:
    def test_zero_at_mean(self, weighted_prior):
        cost, grad = weighted_prior.cost_and_grad(weighted_prior.mean)
        assert cost == 0.0
        assert np.all(grad == 0.0)

    def test_factor_cancellation(self, weighted_prior):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(weighted_prior.n)
        cost, _ = weighted_prior.cost_and_grad(
            weighted_prior.mean + weighted_prior.apply_L(z)
        )
        assert cost == pytest.approx(0.5 * z @ (weighted_prior.M @ z), rel=1e-10)

    def test_gradient_matches_finite_differences(self, weighted_prior):
        rng = np.random.default_rng(5)
        x = weighted_prior.mean + 0.2 * rng.standard_normal(weighted_prior.n)
        d = rng.standard_normal(weighted_prior.n)
        cost, grad = weighted_prior.cost_and_grad(x)
        directional = grad @ (weighted_prior.M @ d)
        h = 1e-6
        cp, _ = weighted_prior.cost_and_grad(x + h * d)
        cm, _ = weighted_prior.cost_and_grad(x - h * d)
        fd = (cp - cm) / (2 * h)
        assert fd == pytest.approx(directional, rel=1e-6)
