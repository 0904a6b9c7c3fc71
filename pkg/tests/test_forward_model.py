"""Forward map, observation operator, and adjoint derivative machinery."""

import numpy as np
import pytest

from robininv import fem
from robininv.forward_model import (
    ErrorModel,
    ObservationOperator,
    PoissonForwardModel,
    SolveCounter,
)
from robininv.mesh import build_slab_mesh, extract_bottom_mesh
from robininv.prior import WEIGHTED, assemble_prior


@pytest.fixture(scope="module")
def setup_2d():
    mesh = build_slab_mesh(10, 1, 4, 1.0, 0.1, dim=2)
    bottom = extract_bottom_mesh(mesh)
    rng = np.random.default_rng(7)
    a = 0.3 * rng.standard_normal(mesh.n_nodes)
    points = np.column_stack([np.linspace(0.15, 0.85, 5), np.full(5, 0.1)])
    obs = ObservationOperator(mesh, points)
    model = PoissonForwardModel(mesh, bottom, a, 1.0, obs)
    prior = assemble_prior(bottom, 7.0, 0.01, 0.0, 1.0, WEIGHTED)
    return mesh, bottom, model, prior


class TestObservationOperator:
    def test_rows_sum_to_one_and_are_sparse(self, setup_2d):
        _, _, model, _ = setup_2d
        B = model.obs.B
        assert np.allclose(np.asarray(B.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert (B != 0).sum(axis=1).max() <= 3  # d + 1 in 2-D

    def test_linear_field_observed_exactly(self, setup_2d):
        mesh, _, model, _ = setup_2d
        u = 1.0 + 2.0 * mesh.nodes[:, 0] - 0.5 * mesh.nodes[:, 1]
        expected = 1.0 + 2.0 * model.obs.points[:, 0] - 0.5 * model.obs.points[:, 1]
        assert np.allclose(model.obs.observe(u), expected, atol=1e-12)

    def test_constant_field(self, setup_2d):
        mesh, _, model, _ = setup_2d
        assert np.allclose(model.obs.observe(np.ones(mesh.n_nodes)), 1.0, atol=1e-12)

    def test_point_off_top_surface_rejected(self, setup_2d):
        mesh = setup_2d[0]
        with pytest.raises(ValueError, match="top"):
            ObservationOperator(mesh, [[0.5, 0.05]])

    def test_default_3d_layout_has_33_points(self):
        from robininv.experiment import default_observation_points

        pts = default_observation_points(3, 1.0, 0.01)
        assert pts.shape == (33, 3)
        assert np.all(pts[:, 2] == 0.01)
        assert np.unique(pts[:, :2], axis=0).shape[0] == 33


class TestErrorModel:
    def test_noise_only(self):
        err = ErrorModel.noise_only(0.1, 4)
        assert np.allclose(err.covariance, 0.01 * np.eye(4))
        r = np.array([1.0, 2.0, 0.0, -1.0])
        assert np.allclose(err.apply_inv(r), r / 0.01)
        w = err.whiten(r)
        assert 0.5 * w @ w == pytest.approx(0.5 * r @ err.apply_inv(r), rel=1e-12)

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(fem.NumericalError):
            ErrorModel(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ErrorModel(np.zeros(3), np.eye(2))


class TestForwardSolve:
    def test_zero_flux_gives_zero_potential(self, setup_2d):
        mesh, bottom, _, _ = setup_2d
        obs = ObservationOperator(mesh, [[0.5, 0.1]])
        model = PoissonForwardModel(mesh, bottom, 0.0, 0.0, obs)
        state = model.solve_forward(np.zeros(bottom.n_nodes))
        assert np.abs(state.u).max() == 0.0

    def test_larger_beta_pulls_bottom_toward_zero(self, setup_2d):
        _, bottom, model, _ = setup_2d
        u_soft = model.solve_forward(np.zeros(bottom.n_nodes)).u
        u_hard = model.solve_forward(np.full(bottom.n_nodes, 10.0)).u
        tr = model.mesh.bottom_trace
        assert np.linalg.norm(u_hard[tr]) < np.linalg.norm(u_soft[tr])

    def test_counter_increments(self, setup_2d):
        _, bottom, model, _ = setup_2d
        before = model.counter.forward
        model.solve_forward(np.zeros(bottom.n_nodes))
        assert model.counter.forward == before + 1

    def test_factorization_reuse_is_exact(self, setup_2d):
        _, bottom, model, _ = setup_2d
        state = model.solve_forward(np.zeros(bottom.n_nodes))
        b = np.zeros(model.free.size)
        b[3] = 1.0
        assert np.array_equal(state.solver.solve(b), state.solver.solve(b))

    def test_richardson_consistency_between_meshes(self):
        # observations converge under refinement: coarse/mid error vs the fine
        # reference shrinks by roughly the expected second-order factor
        points = np.column_stack([np.linspace(0.2, 0.8, 4), np.full(4, 0.1)])
        results = {}
        for n in (8, 16, 32):
            mesh = build_slab_mesh(n, 1, max(2, n // 4), 1.0, 0.1, dim=2)
            bottom = extract_bottom_mesh(mesh)
            obs = ObservationOperator(mesh, points)
            model = PoissonForwardModel(mesh, bottom, 0.2, 1.0, obs)
            beta = 1.0 + np.sin(2 * np.pi * bottom.nodes[:, 0])
            results[n] = model.solve_forward(beta).obs
        err_coarse = np.abs(results[8] - results[32]).max()
        err_mid = np.abs(results[16] - results[32]).max()
        assert err_mid < err_coarse
        # coarse error estimate from Richardson; the mid error stays within 5x
        assert err_mid <= 5.0 * err_coarse / 4.0


class TestMisfitGradient:
    def test_matched_data_zero_cost_and_gradient(self, setup_2d):
        _, bottom, model, _ = setup_2d
        beta = np.full(bottom.n_nodes, 0.5)
        state = model.solve_forward(beta)
        err = ErrorModel.noise_only(0.01, model.obs.q)
        cost, grad = model.misfit_gradient(state, state.obs, err)
        assert cost == 0.0
        assert np.abs(grad).max() <= 1e-14

    def test_gradient_matches_finite_differences(self, setup_2d):
        _, bottom, model, prior = setup_2d
        rng = np.random.default_rng(21)
        err = ErrorModel.noise_only(0.01, model.obs.q)
        d_obs = model.solve_forward(prior.sample(3)).obs
        beta = prior.mean + 0.2 * rng.standard_normal(bottom.n_nodes)
        msolve = prior._m_solver.solve

        def full_cost_grad(b):
            state = model.solve_forward(b)
            mis, assembled = model.misfit_gradient(state, d_obs, err)
            pc, pg = prior.cost_and_grad(b)
            return mis + pc, msolve(assembled) + pg

        cost, grad = full_cost_grad(beta)
        direction = rng.standard_normal(bottom.n_nodes)
        directional = grad @ (prior.M @ direction)
        rel_errs = []
        for h in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]:
            cp, _ = full_cost_grad(beta + h * direction)
            cm, _ = full_cost_grad(beta - h * direction)
            fd = (cp - cm) / (2 * h)
            rel_errs.append(abs(fd - directional) / abs(directional))
        assert min(rel_errs) <= 1e-4
        # V-shape: the best step beats both sweep ends
        best = int(np.argmin(rel_errs))
        assert rel_errs[best] < rel_errs[0] and rel_errs[best] < rel_errs[-1]

    def test_scaling_with_noise_covariance(self, setup_2d):
        _, bottom, model, prior = setup_2d
        beta = prior.mean
        state = model.solve_forward(beta)
        d_obs = state.obs + 0.05
        c1, g1 = model.misfit_gradient(state, d_obs, ErrorModel.noise_only(0.01, model.obs.q))
        # doubling the covariance halves cost and gradient
        c2, g2 = model.misfit_gradient(
            state, d_obs, ErrorModel(np.zeros(model.obs.q), 2 * 0.01**2 * np.eye(model.obs.q))
        )
        assert c2 == pytest.approx(0.5 * c1, rel=1e-12)
        assert np.allclose(g2, 0.5 * g1, rtol=1e-12)

    def test_mean_shift_sign(self, setup_2d):
        # residual is obs - d_obs + mean_shift: a shift equal to the misfit
        # cancels it exactly
        _, bottom, model, prior = setup_2d
        state = model.solve_forward(prior.mean)
        d_obs = state.obs + 0.3
        err = ErrorModel(np.full(model.obs.q, 0.3), 0.01 * np.eye(model.obs.q))
        cost, grad = model.misfit_gradient(state, d_obs, err)
        assert cost == pytest.approx(0.0, abs=1e-25)
        assert np.abs(grad).max() <= 1e-14


class TestGnHessian:
    def test_zero_direction(self, setup_2d):
        _, bottom, model, prior = setup_2d
        state = model.solve_forward(prior.mean)
        err = ErrorModel.noise_only(0.01, model.obs.q)
        out = model.gn_hessian_action(state, np.zeros(bottom.n_nodes), err)
        assert np.abs(out).max() == 0.0

    def test_m_symmetry_and_psd(self, setup_2d):
        _, bottom, model, prior = setup_2d
        rng = np.random.default_rng(9)
        state = model.solve_forward(prior.sample(1))
        err = ErrorModel.noise_only(0.01, model.obs.q)
        msolve = prior._m_solver.solve

        def H(v):
            return msolve(model.gn_hessian_action(state, v, err))

        for _ in range(10):
            v, w = rng.standard_normal((2, bottom.n_nodes))
            Hv, Hw = H(v), H(w)
            lhs = Hv @ (prior.M @ w)
            rhs = v @ (prior.M @ Hw)
            hv_norm = np.sqrt(Hv @ (prior.M @ Hv)) * np.sqrt(w @ (prior.M @ w))
            assert abs(lhs - rhs) <= 1e-8 * max(hv_norm, 1e-300)
            assert v @ (prior.M @ H(v)) >= 0.0

    def test_composition_equals_adjoint_chain(self, setup_2d):
        _, bottom, model, prior = setup_2d
        rng = np.random.default_rng(10)
        state = model.solve_forward(prior.mean)
        err = ErrorModel.noise_only(0.01, model.obs.q)
        v = rng.standard_normal(bottom.n_nodes)
        direct = model.gn_hessian_action(state, v, err)
        chained = model.obs_adjoint_action(
            state, err.apply_inv(model.linearized_obs_action(state, v))
        )
        assert np.allclose(direct, chained, atol=1e-8 * max(np.abs(direct).max(), 1e-300))

    def test_linearized_obs_duality(self, setup_2d):
        _, bottom, model, prior = setup_2d
        rng = np.random.default_rng(11)
        state = model.solve_forward(prior.mean)
        v = rng.standard_normal(bottom.n_nodes)
        w = rng.standard_normal(model.obs.q)
        Fv = model.linearized_obs_action(state, v)
        Fstar_w = prior._m_solver.solve(model.obs_adjoint_action(state, w))
        lhs = Fv @ w
        rhs = v @ (prior.M @ Fstar_w)
        assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_zero_direction_observation(self, setup_2d):
        _, bottom, model, prior = setup_2d
        state = model.solve_forward(prior.mean)
        assert np.all(model.linearized_obs_action(state, np.zeros(bottom.n_nodes)) == 0.0)


class TestSolveCounter:
    def test_totals(self):
        c = SolveCounter(forward=2, adjoint=1, incr_forward=3, incr_adjoint=3)
        assert c.total == 9
        assert c.as_dict()["total"] == 9

    def test_all_four_kinds_counted(self, setup_2d):
        _, bottom, model, prior = setup_2d
        c0 = model.counter.as_dict()
        state = model.solve_forward(prior.mean)
        err = ErrorModel.noise_only(0.01, model.obs.q)
        model.misfit_gradient(state, state.obs, err)
        model.gn_hessian_action(state, np.ones(bottom.n_nodes), err)
        c1 = model.counter.as_dict()
        assert c1["forward"] == c0["forward"] + 1
        assert c1["adjoint"] == c0["adjoint"] + 1
        assert c1["incr_forward"] == c0["incr_forward"] + 1
        assert c1["incr_adjoint"] == c0["incr_adjoint"] + 1
