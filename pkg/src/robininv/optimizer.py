"""Inexact Gauss-Newton MAP solver with preconditioned CG inner iterations.

All inner products and norms are mass-weighted, matching the function-space
setting of the parameter field.  The CG tolerance follows the
residual-ratio Eisenstat-Walker forcing min(0.5, sqrt(|g_k|/|g_0|)), the
step is globalized by Armijo backtracking, and the prior covariance acts
as the CG preconditioner.

Per-iteration accounting: row 0 records the initial forward+adjoint
evaluation (2 solves); every later row costs 2 + 2 * cg_iters + backtracks
solves, because the accepted line-search trial doubles as the next
iterate's forward solve and only the adjoint is new.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LineSearchError(RuntimeError):
    """Armijo backtracking exhausted, including the steepest-descent retry.

    Carries the last iterate and the partial convergence record so callers
    can keep the branch's outputs.
    """

    def __init__(self, message, beta=None, record=None):
        super().__init__(message)
        self.beta = beta
        self.record = record


@dataclass
class GNConfig:
    rel_grad_tol: float = 1e-7
    max_gn_iters: int = 100
    ew_max_forcing: float = 0.5
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 20
    max_cg_iters: int | None = None  # defaults to the parameter dimension

    def __post_init__(self):
        if not (0 < self.rel_grad_tol < 1):
            raise ValueError(f"rel_grad_tol must be in (0,1), got {self.rel_grad_tol}")
        if not (0 < self.armijo_c < 1):
            raise ValueError(f"armijo_c must be in (0,1), got {self.armijo_c}")
        for name in ("max_gn_iters", "ew_max_forcing", "armijo_shrink", "max_backtracks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ConvergenceRow:
    gn_iter: int
    cost: float
    misfit_cost: float
    prior_cost: float
    grad_norm: float
    cg_iters: int
    backtracks: int
    cumulative_poisson_solves: int


CSV_COLUMNS = (
    "gn_iter,cost,misfit_cost,prior_cost,grad_norm,"
    "cg_iters,backtracks,cumulative_poisson_solves"
)


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)
    converged: bool = False
    flag: str = "converged"  # or "max_iterations", "line_search_failure"

    @property
    def gn_iterations(self):
        return len(self.rows) - 1

    @property
    def total_cg(self):
        return sum(r.cg_iters for r in self.rows)

    @property
    def total_backtracks(self):
        return sum(r.backtracks for r in self.rows)

    @property
    def total_poisson(self):
        return self.rows[-1].cumulative_poisson_solves if self.rows else 0

    def to_csv(self, path):
        lines = [CSV_COLUMNS]
        for r in self.rows:
            lines.append(
                "%d,%.17g,%.17g,%.17g,%.17g,%d,%d,%d"
                % (
                    r.gn_iter, r.cost, r.misfit_cost, r.prior_cost, r.grad_norm,
                    r.cg_iters, r.backtracks, r.cumulative_poisson_solves,
                )
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self):
        n = self.gn_iterations
        return {
            "gn_iterations": n,
            "cg_iterations": self.total_cg,
            "avg_cg": self.total_cg / n if n else 0.0,
            "backtracks": self.total_backtracks,
            "poisson_solves": self.total_poisson,
            "converged": self.converged,
            "flag": self.flag,
        }


class MapObjective:
    """Couples a forward model, a prior, and an error model into the MAP
    objective; converts assembled vectors to the mass-weighted gradient
    convention used throughout the optimizer."""

    def __init__(self, model, prior_beta, err, d_obs=None):
        self.model = model
        self.prior = prior_beta
        self.err = err
        self.d_obs = None if d_obs is None else np.asarray(d_obs, dtype=float)
        self._msolve = prior_beta._m_solver.solve

    def evaluate(self, beta):
        """Forward solve plus cost pieces (one forward solve)."""
        state = self.model.solve_forward(beta)
        misfit = self.model.misfit_cost(state, self.d_obs, self.err)
        prior_cost, _ = self.prior.cost_and_grad(beta)
        return state, misfit, prior_cost

    def gradient(self, beta, state):
        """Mass-weighted full gradient at a solved state (one adjoint solve)."""
        _, assembled = self.model.misfit_gradient(state, self.d_obs, self.err)
        _, prior_grad = self.prior.cost_and_grad(beta)
        return self._msolve(assembled) + prior_grad

    def hessian_action(self, state):
        def action(v):
            assembled = self.model.gn_hessian_action(state, v, self.err)
            return self._msolve(assembled) + self.prior.apply_precision(v)

        return action

    def misfit_hessian_action(self, state):
        def action(v):
            return self._msolve(self.model.gn_hessian_action(state, v, self.err))

        return action

    def preconditioner(self, v):
        return self.prior.apply_covariance(v)

    def m_inner(self, x, y):
        return float(x @ (self.prior.M @ y))

    def poisson_solves(self):
        return self.model.counter.total


def cg_inner(hess_action, grad, precond, m_inner, forcing, max_iters):
    """Preconditioned CG for H d = -g in the mass-weighted inner product.

    Terminates when the preconditioned residual norm drops below
    ``forcing`` times its initial value.  Negative curvature aborts with
    the current iterate (the Gauss-Newton Hessian is PSD, so this only
    signals numerical trouble).
    """
    n = grad.shape[0]
    delta = np.zeros(n)
    r = -grad
    r0_norm = math.sqrt(max(m_inner(r, r), 0.0))
    if r0_norm == 0.0:
        return delta, 0
    z = precond(r)
    p = z.copy()
    rz = m_inner(r, z)
    for k in range(max_iters):
        hp = hess_action(p)
        php = m_inner(p, hp)
        if php <= 0:
            if k == 0:
                return z, 1
            return delta, k
        step = rz / php
        delta = delta + step * p
        r = r - step * hp
        if math.sqrt(max(m_inner(r, r), 0.0)) <= forcing * r0_norm:
            return delta, k + 1
        z = precond(r)
        rz_new = m_inner(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return delta, max_iters


def solve_map(objective, beta0, cfg=None):
    """Minimize the MAP objective from ``beta0``.

    Returns (beta_map, ConvergenceRecord).  Raises
    :class:`LineSearchError` when backtracking fails even after the
    steepest-descent fallback; hitting ``max_gn_iters`` only flags the
    record as non-converged.
    """
    cfg = cfg or GNConfig()
    beta = np.array(beta0, dtype=float)
    max_cg = cfg.max_cg_iters or beta.size
    record = ConvergenceRecord()

    state, misfit, prior_cost = objective.evaluate(beta)
    g = objective.gradient(beta, state)
    g0_norm = math.sqrt(max(objective.m_inner(g, g), 0.0))
    grad_norm = g0_norm
    cost = misfit + prior_cost
    record.rows.append(ConvergenceRow(
        0, cost, misfit, prior_cost, grad_norm, 0, 0, objective.poisson_solves()
    ))
    if g0_norm == 0.0:
        record.converged = True
        return beta, record

    for it in range(1, cfg.max_gn_iters + 1):
        forcing = min(cfg.ew_max_forcing, math.sqrt(grad_norm / g0_norm))
        delta, n_cg = cg_inner(
            objective.hessian_action(state), g, objective.preconditioner,
            objective.m_inner, forcing, max_cg,
        )

        slope = objective.m_inner(g, delta)
        if slope >= 0:
            delta = -objective.preconditioner(g)
            slope = objective.m_inner(g, delta)

        accepted, trials = _line_search(objective, beta, cost, g, delta, slope, cfg)
        if accepted is None:
            delta = -objective.preconditioner(g)
            slope = objective.m_inner(g, delta)
            accepted, extra = _line_search(objective, beta, cost, g, delta, slope, cfg)
            trials += extra
            if accepted is None:
                record.flag = "line_search_failure"
                record.rows.append(ConvergenceRow(
                    it, cost, misfit, prior_cost, grad_norm, n_cg, trials,
                    objective.poisson_solves(),
                ))
                raise LineSearchError(
                    f"no acceptable step at iteration {it} "
                    f"(grad norm {grad_norm:.3e})",
                    beta=beta, record=record,
                )

        beta, state, misfit, prior_cost, cost = accepted
        g = objective.gradient(beta, state)
        grad_norm = math.sqrt(max(objective.m_inner(g, g), 0.0))
        record.rows.append(ConvergenceRow(
            it, cost, misfit, prior_cost, grad_norm, n_cg, trials - 1,
            objective.poisson_solves(),
        ))
        if grad_norm <= cfg.rel_grad_tol * g0_norm:
            record.converged = True
            return beta, record

    record.flag = "max_iterations"
    return beta, record


def _line_search(objective, beta, cost, g, delta, slope, cfg):
    """Armijo backtracking; returns (accepted tuple or None, trial count)."""
    t = 1.0
    trials = 0
    while trials <= cfg.max_backtracks:
        candidate = beta + t * delta
        state, misfit, prior_cost = objective.evaluate(candidate)
        trials += 1
        new_cost = misfit + prior_cost
        if new_cost <= cost + cfg.armijo_c * t * slope:
            return (candidate, state, misfit, prior_cost, new_cost), trials
        t *= cfg.armijo_shrink
    return None, trials
