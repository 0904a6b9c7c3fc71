"""Basal Robin coefficient inversion under an uncertain conductivity field.

Adjoint-based inexact Gauss-Newton MAP estimation with approximation-error
premarginalization over the interior conductivity and low-rank Laplace
posterior uncertainty quantification.
"""

__version__ = "0.1.0"
