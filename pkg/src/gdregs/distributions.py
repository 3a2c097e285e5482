"""Diagonal Gaussians as shift-scale flows, a Bernoulli likelihood, and the
re-expression of a sample as if it had been drawn from another flow.

All densities sum over the last axis, so a batch of samples with shape
``(..., D)`` yields log densities with shape ``(...)``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tape as T
from .tape import DomainError, Node

LOG_2PI = float(np.log(2.0 * np.pi))
SCALE_FLOOR = 1e-6


def positive_scale(raw: Node) -> Node:
    """softplus(raw) + 1e-6, so the inverse flow never divides by zero."""
    return T.softplus(raw) + SCALE_FLOOR


def _node_like(ref: Node, value) -> Node:
    return value if isinstance(value, Node) else ref.tape.constant(value)


def _check_dims(z, mean: Node):
    zdim = (z.shape if isinstance(z, Node) else np.shape(z))[-1:]
    if zdim != mean.shape[-1:]:
        raise ValueError(f"dimension mismatch: sample has trailing shape {zdim}, "
                         f"distribution has {mean.shape[-1:]}")


class ShiftScaleFlow:
    """The bijection z = mean + scale * eps and its inverse."""

    def __init__(self, mean: Node, scale: Node):
        self.mean = mean
        self.scale = _node_like(mean, scale)

    def forward(self, eps) -> Node:
        return self.mean + self.scale * eps

    def inverse(self, z) -> Node:
        return (z - self.mean) / self.scale


class DiagGaussian:
    """Diagonal Gaussian with node-valued mean and scale.

    ``stopped`` optionally builds the parameter-stopped copy. A model passes a
    factory that re-evaluates its conditioner with stopped network weights, so
    the barrier sits on the weights and the dependence on parent latents
    survives. Without a factory the mean and scale nodes themselves are stopped.
    """

    def __init__(self, mean: Node, scale, stopped: Callable[[], "DiagGaussian"] | None = None):
        self.mean = mean
        self.scale = _node_like(mean, scale)
        self._stopped = stopped

    @property
    def flow(self) -> ShiftScaleFlow:
        return ShiftScaleFlow(self.mean, self.scale)

    def log_density(self, z) -> Node:
        """Per-coordinate log density (not summed)."""
        _check_dims(z, self.mean)
        u = (z - self.mean) / self.scale
        return -0.5 * T.square(u) - T.log(self.scale) - 0.5 * LOG_2PI

    def log_prob(self, z) -> Node:
        return T.sum(self.log_density(z), axis=-1)

    def sample_reparam(self, eps) -> Node:
        _check_dims(eps, self.mean)
        return self.flow.forward(eps)

    def with_stopped_params(self) -> "DiagGaussian":
        if self._stopped is not None:
            return self._stopped()
        return DiagGaussian(T.stop_gradient(self.mean), T.stop_gradient(self.scale))


def standard_normal(tape: T.Tape, dim: int) -> DiagGaussian:
    """N(0, I) with no parameters; its stopped copy is itself."""
    dist = DiagGaussian(tape.constant(np.zeros(dim)), tape.constant(np.ones(dim)))
    dist._stopped = lambda: dist
    return dist


class BernoulliLikelihood:
    """Factorized Bernoulli over binary pixels, parameterized by logits."""

    def __init__(self, logits: Node):
        self.logits = logits

    def log_prob(self, x) -> Node:
        _check_dims(x, self.logits)
        return T.sum(self.logits * x - T.softplus(self.logits), axis=-1)


class UnitGaussianLikelihood:
    """N(x; mean, I)."""

    def __init__(self, mean: Node):
        self.mean = mean

    def log_prob(self, x) -> Node:
        _check_dims(x, self.mean)
        return T.sum(-0.5 * T.square(x - self.mean) - 0.5 * LOG_2PI, axis=-1)


def reparameterize_as_if_from(p, z_q: Node) -> Node:
    """Re-express ``z_q`` as a sample of ``p`` (a flow or a ``DiagGaussian``).

    The noise eps = T_p^{-1}(z_q) is computed and frozen, then pushed forward
    through T_p again. The value is unchanged but the gradient now flows into
    p's mean and scale (and whatever they depend on).
    """
    flow = p.flow if isinstance(p, DiagGaussian) else p
    eps = flow.inverse(z_q)
    if not np.all(np.isfinite(eps.value)):
        raise DomainError("non-finite noise while re-expressing a sample")
    return flow.forward(T.stop_gradient(eps))
