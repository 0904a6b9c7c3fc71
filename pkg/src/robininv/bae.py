"""Monte Carlo approximation-error statistics and the enhanced error model.

The discrepancy between the accurate forward model (random conductivity,
fine mesh) and the approximate one (conductivity fixed at its prior mean)
is sampled over the joint prior, summarized by its mean and unbiased
covariance, and folded into the likelihood as extra Gaussian noise:
total-error mean e* + eps*, covariance Gamma_e + Gamma_eps.  All sampling
happens offline; the accurate model is never used during inversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .forward_model import ErrorModel

# Eigenvalue floor for the enhanced covariance, relative to its trace.
_SPD_FLOOR = 1e-12


@dataclass
class ErrorStats:
    """Sample mean and covariance of the approximation error."""

    eps_mean: np.ndarray
    eps_cov: np.ndarray
    sample_count: int
    master_seed: int | None = None
    fingerprints: dict | None = None

    def to_json(self, path):
        payload = {
            "r": self.sample_count,
            "eps_mean": self.eps_mean.tolist(),
            "eps_cov": self.eps_cov.ravel().tolist(),
            "master_seed": self.master_seed,
            "fingerprints": self.fingerprints or {},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        mean = np.asarray(payload["eps_mean"], dtype=float)
        q = mean.size
        return cls(
            eps_mean=mean,
            eps_cov=np.asarray(payload["eps_cov"], dtype=float).reshape(q, q),
            sample_count=int(payload["r"]),
            master_seed=payload.get("master_seed"),
            fingerprints=payload.get("fingerprints") or {},
        )


def sample_seed(master_seed, index, stream):
    """Deterministic per-sample seed, independent of evaluation order."""
    return np.random.SeedSequence(master_seed, spawn_key=(index, stream))


def compute_error_sample(accurate, approx, prior_a, prior_beta, master_seed, index):
    """One discrepancy draw eps = accurate(a, beta) - approx(beta)."""
    a = prior_a.sample(sample_seed(master_seed, index, 0))
    beta = prior_beta.sample(sample_seed(master_seed, index, 1))
    return np.asarray(accurate(a, beta), dtype=float) - np.asarray(approx(beta), dtype=float)


def compute_error_samples(accurate, approx, prior_a, prior_beta, r, master_seed):
    """Draw r discrepancy samples over the joint prior.

    ``accurate(a_values, beta_values)`` and ``approx(beta_values)`` return
    observation vectors; beta is shared between the two models within each
    sample.  Per-sample seeds derive from ``master_seed`` so the result is
    independent of evaluation order.  A failed solve aborts with the
    offending sample index.
    """
    if r < 1:
        raise ValueError(f"sample count must be positive, got {r}")
    samples = []
    for ell in range(r):
        try:
            samples.append(
                compute_error_sample(accurate, approx, prior_a, prior_beta, master_seed, ell)
            )
        except Exception as exc:
            raise RuntimeError(f"approximation-error sample {ell} failed: {exc}") from exc
    return np.asarray(samples)


def sample_stats(samples, master_seed=None, fingerprints=None):
    """Unbiased mean and covariance of the sample set."""
    samples = np.asarray(samples, dtype=float)
    r = samples.shape[0]
    if r < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {r}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (r - 1)
    return ErrorStats(
        eps_mean=mean,
        eps_cov=0.5 * (cov + cov.T),
        sample_count=r,
        master_seed=master_seed,
        fingerprints=fingerprints,
    )


def enhanced_model(stats, noise_cov, noise_mean=None):
    """Total-error model: mean e* + eps*, covariance Gamma_e + Gamma_eps,
    with eigenvalues floored to keep the sum SPD."""
    noise_cov = np.asarray(noise_cov, dtype=float)
    q = stats.eps_mean.size
    if noise_cov.shape != (q, q):
        raise ValueError(f"noise covariance shape {noise_cov.shape}, expected {(q, q)}")
    if noise_mean is None:
        noise_mean = np.zeros(q)
    cov = noise_cov + stats.eps_cov
    lam, U = np.linalg.eigh(0.5 * (cov + cov.T))
    floor = _SPD_FLOOR * np.trace(cov)
    lam = np.maximum(lam, floor)
    cov = (U * lam) @ U.T
    return ErrorModel(np.asarray(noise_mean, dtype=float) + stats.eps_mean,
                      0.5 * (cov + cov.T))


@dataclass
class DominanceReport:
    """Both sides of the error-dominance rule of thumb."""

    noise_level: float  # |e*|^2 + trace(Gamma_e)
    approx_level: float  # |eps*|^2 + trace(Gamma_eps)
    dominant: bool
    component_noise: np.ndarray  # e*(k)^2 + Gamma_e(k,k)
    component_approx: np.ndarray  # eps*(k)^2 + Gamma_eps(k,k)
    component_dominant: np.ndarray

    def as_dict(self):
        return {
            "noise_level": self.noise_level,
            "approx_level": self.approx_level,
            "dominant": self.dominant,
            "component_noise": self.component_noise.tolist(),
            "component_approx": self.component_approx.tolist(),
            "component_dominant": self.component_dominant.tolist(),
        }


def dominance_check(stats, noise_mean, noise_cov):
    """Check whether approximation errors dominate the measurement noise,
    globally and per component."""
    noise_mean = np.asarray(noise_mean, dtype=float)
    noise_cov = np.asarray(noise_cov, dtype=float)
    noise_level = float(noise_mean @ noise_mean + np.trace(noise_cov))
    approx_level = float(stats.eps_mean @ stats.eps_mean + np.trace(stats.eps_cov))
    comp_noise = noise_mean**2 + np.diag(noise_cov)
    comp_approx = stats.eps_mean**2 + np.diag(stats.eps_cov)
    return DominanceReport(
        noise_level=noise_level,
        approx_level=approx_level,
        dominant=noise_level < approx_level,
        component_noise=comp_noise,
        component_approx=comp_approx,
        component_dominant=comp_noise < comp_approx,
    )
