"""Closed-form moments of cross-entropy gradient estimators for Gaussians.

For q = N(mu_q, sigma_q^2) and p = N(mu_p, sigma_p^2), per coordinate, this
module gives E_q[log p], the exact mean and variance of the single-sample
naive estimator grad log p(z) and of the GDReGs estimator, the region where
GDReGs has lower variance, and the optimal control-variate mix of the two.
Everything is elementwise over coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussPair:
    mu_q: np.ndarray
    sigma_q: np.ndarray
    mu_p: np.ndarray
    sigma_p: np.ndarray

    def __post_init__(self):
        for name in ("mu_q", "sigma_q", "mu_p", "sigma_p"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.sigma_q <= 0) or np.any(self.sigma_p <= 0):
            raise ValueError("scales must be strictly positive")

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, sigma=(0.3, 3.0), mu=(-2.0, 2.0)) -> "GaussPair":
        return cls(rng.uniform(*mu, size=dim), rng.uniform(*sigma, size=dim),
                   rng.uniform(*mu, size=dim), rng.uniform(*sigma, size=dim))


@dataclass(frozen=True)
class Moments:
    expectation: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class ControlVariate:
    alpha_mu: np.ndarray
    alpha_sigma: np.ndarray
    residual_var_mu: np.ndarray
    residual_var_sigma: np.ndarray


def xent_value(pair: GaussPair) -> np.ndarray:
    """E_q[log p] per coordinate."""
    sq, sp, d = pair.sigma_q, pair.sigma_p, pair.mu_p - pair.mu_q
    return -0.5 * LOG_2PI - np.log(sp) - (sq ** 2 + d ** 2) / (2 * sp ** 2)


def _expectations(pair: GaussPair) -> tuple[np.ndarray, np.ndarray]:
    sq2, sp, d = pair.sigma_q ** 2, pair.sigma_p, pair.mu_q - pair.mu_p
    return d / sp ** 2, (sq2 - sp ** 2 + d ** 2) / sp ** 3


def naive_moments(pair: GaussPair) -> tuple[Moments, Moments]:
    """Moments of grad_{mu_p} log p(z) and grad_{sigma_p} log p(z), z ~ q."""
    e_mu, e_sigma = _expectations(pair)
    sq2, sp2, d2 = pair.sigma_q ** 2, pair.sigma_p ** 2, (pair.mu_q - pair.mu_p) ** 2
    var_mu = sq2 / sp2 ** 2
    var_sigma = 2 * sq2 ** 2 / sp2 ** 3 + 4 * sq2 * d2 / sp2 ** 3
    return Moments(e_mu, var_mu), Moments(e_sigma, var_sigma)


def gdregs_moments(pair: GaussPair) -> tuple[Moments, Moments]:
    """Same expectations as the naive estimator, different variances."""
    e_mu, e_sigma = _expectations(pair)
    sq2, sp2, d2 = pair.sigma_q ** 2, pair.sigma_p ** 2, (pair.mu_q - pair.mu_p) ** 2
    var_mu = (sq2 / sp2 ** 2) * (sp2 - sq2) ** 2 / sq2 ** 2
    var_sigma = 2 * (sq2 - sp2) ** 2 / sp2 ** 3 + (sp2 - 2 * sq2) ** 2 * d2 / (sq2 * sp2 ** 3)
    return Moments(e_mu, var_mu), Moments(e_sigma, var_sigma)


def crossover(pair: GaussPair) -> tuple[np.ndarray, np.ndarray]:
    """Where GDReGs has no larger variance than naive, for mu_p and for sigma_p."""
    sq2, sp2, d2 = pair.sigma_q ** 2, pair.sigma_p ** 2, (pair.mu_p - pair.mu_q) ** 2
    return sp2 <= 2 * sq2, sp2 <= 4 * sq2 * (1 - sq2 / (d2 + 2 * sq2))


def optimal_cv(pair: GaussPair) -> ControlVariate:
    """Variance-minimizing alpha for naive + alpha * (gdregs - naive)."""
    sq2, sp2, d2 = pair.sigma_q ** 2, pair.sigma_p ** 2, (pair.mu_p - pair.mu_q) ** 2
    alpha_mu = sq2 / sp2
    alpha_sigma = (2 * sq2 / sp2) * (d2 + sq2) / (d2 + 2 * sq2)
    residual_sigma = (2 * sq2 ** 2 / sp2 ** 3) * d2 / (d2 + 2 * sq2)
    return ControlVariate(alpha_mu, alpha_sigma, np.zeros_like(alpha_mu), residual_sigma)
