"""Monte-Carlo checks of the DReGs and GDReGs gradient identities in 1-D.

Both sides of each identity are estimated from independent samples with
per-draw parameter copies, and compared by a z-score per parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tape as T
from ..distributions import DiagGaussian, reparameterize_as_if_from
from ..tape import Tape
from .stats import stream


@dataclass
class IdentityResult:
    kind: str
    power: int
    lhs_mean: np.ndarray  # (mean param, scale param)
    rhs_mean: np.ndarray
    se: np.ndarray
    n: int

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, (self.lhs_mean - self.rhs_mean) / self.se,
                            np.where(self.lhs_mean == self.rhs_mean, 0.0, np.inf))

    def passed(self, n_se: float = 4.0) -> bool:
        return bool(np.all(np.abs(self.z) < n_se))


def _g(z, power: int):
    """z**power on the tape; power 0 still depends on z (with zero slope)."""
    out = z * 0.0 + 1.0
    for _ in range(power):
        out = out * z
    return out


def _leaves(tape, mu, sigma, n):
    return (tape.parameter(np.full((n, 1), float(mu)), "mu"),
            tape.parameter(np.full((n, 1), float(sigma)), "sigma"))


def _grads(loss) -> np.ndarray:
    g = T.backward(loss, ["mu", "sigma"])
    return np.concatenate([g["mu"], g["sigma"]], axis=1)


def dregs_identity(mu: float, sigma: float, power: int, n: int, seed: int) -> IdentityResult:
    """E_q[g(z) d log q(z)] vs E_eps[g'(z) dT_q(eps)] for g(z) = z**power."""
    t = Tape()
    m, s = _leaves(t, mu, sigma, n)
    z = mu + sigma * stream(seed, 0).standard_normal((n, 1))
    lhs = _grads(T.sum(DiagGaussian(m, s).log_density(z) * _g(t.constant(z), power).value))

    t = Tape()
    m, s = _leaves(t, mu, sigma, n)
    z = DiagGaussian(m, s).sample_reparam(stream(seed, 1).standard_normal((n, 1)))
    rhs = _grads(T.sum(_g(z, power)))
    return _result("dregs", power, lhs, rhs)


def gdregs_identity(q: tuple, p: tuple, power: int, n: int, seed: int) -> IdentityResult:
    """E_q[g(z) d log p(z)] vs E_q[(g dlog(q/p)/dz + g') dT_p(eps~)] for g(z) = z**power.

    ``q`` and ``p`` are (mean, scale) pairs; derivatives are in p's parameters.
    """
    t = Tape()
    m, s = _leaves(t, *p, n)
    z = q[0] + q[1] * stream(seed, 0).standard_normal((n, 1))
    lhs = _grads(T.sum(DiagGaussian(m, s).log_density(z) * _g(t.constant(z), power).value))

    t = Tape()
    m, s = _leaves(t, *p, n)
    p_dist = DiagGaussian(m, s)
    q_dist = DiagGaussian(t.constant([q[0]]), t.constant([q[1]]))
    z = q[0] + q[1] * stream(seed, 1).standard_normal((n, 1))
    z_p = reparameterize_as_if_from(p_dist, z)
    g = _g(z_p, power)
    log_ratio = q_dist.with_stopped_params().log_density(z_p) - p_dist.with_stopped_params().log_density(z_p)
    rhs = _grads(T.sum(g + T.stop_gradient(g) * log_ratio))
    return _result("gdregs", power, lhs, rhs)


def _result(kind, power, lhs, rhs) -> IdentityResult:
    n = lhs.shape[0]
    se = np.sqrt(lhs.var(axis=0, ddof=1) / n + rhs.var(axis=0, ddof=1) / n)
    return IdentityResult(kind, power, lhs.mean(axis=0), rhs.mean(axis=0), se, n)
