"""Monte-Carlo draws of the cross-entropy gradient estimators.

Each draw is one sample z ~ q and one reverse sweep; draws are vectorized by
giving p's mean and scale one copy per draw.
"""
from __future__ import annotations

import numpy as np

from ..analytic import GaussPair, optimal_cv
from ..distributions import DiagGaussian
from ..estimators import cross_entropy_estimators, grad_estimate
from .. import tape as T
from ..tape import Tape
from .stats import stream

BLOCK = 1 << 16
ESTIMATORS = ("naive", "gdregs", "cv")


def xent_gradient_draws(pair: GaussPair, n: int, seed: int, alpha=None, block: int = BLOCK) -> dict:
    """Draws of each estimator of grad E_q[log p] in (mu_p, sigma_p).

    Returns ``{(estimator, "mu"|"sigma"): (n, D) array}``. The control variate
    uses ``alpha = (alpha_mu, alpha_sigma)``, by default the optimal pair.
    Block ``b`` of draws uses stream ``(seed, b)``.
    """
    if alpha is None:
        cv = optimal_cv(pair)
        alpha = (cv.alpha_mu, cv.alpha_sigma)
    dim = pair.mu_q.size
    out = {(e, g): np.empty((n, dim)) for e in ESTIMATORS for g in ("mu", "sigma")}
    for b, start in enumerate(range(0, n, block)):
        m = min(block, n - start)
        eps = stream(seed, b).standard_normal((block, dim))[:m]
        tape = Tape()
        mu = tape.parameter(np.broadcast_to(pair.mu_p, (m, dim)), "mu_p")
        sigma = tape.parameter(np.broadcast_to(pair.sigma_p, (m, dim)), "sigma_p")
        q = DiagGaussian(tape.constant(pair.mu_q), tape.constant(pair.sigma_q))
        ce = cross_entropy_estimators(q, DiagGaussian(mu, sigma), pair.mu_q + pair.sigma_q * eps)
        for name, loss in (("naive", ce.naive), ("gdregs", ce.gdregs)):
            g = grad_estimate(T.sum(loss), ["mu_p", "sigma_p"])
            out[(name, "mu")][start:start + m] = g["mu_p"]
            out[(name, "sigma")][start:start + m] = g["sigma_p"]
        out[("cv", "mu")][start:start + m] = grad_estimate(ce.cv(alpha[0]), ["mu_p"])["mu_p"]
        out[("cv", "sigma")][start:start + m] = grad_estimate(ce.cv(alpha[1]), ["sigma_p"])["sigma_p"]
    return out

