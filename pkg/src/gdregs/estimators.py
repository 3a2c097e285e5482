"""The IWAE objective and the surrogate losses behind each gradient estimator.

Every surrogate is a scalar loss summed over replicates and datapoints. A
reverse sweep of a surrogate with respect to its parameter group yields minus
one Monte-Carlo draw of the corresponding estimator; ``grad_estimate`` flips
the sign so callers get an estimate of the objective's gradient.

Estimators per group:

* lambda: naive IWAE gradient.
* phi: ``naive`` (plain reparameterized IWAE gradient, score terms included),
  ``stl`` (direct score dropped), ``dregs`` (direct score doubly reparameterized).
* theta: ``naive`` or ``gdregs``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .distributions import DiagGaussian, reparameterize_as_if_from
from .model import BoundModel, log_weights, q_sample_hierarchy, reexpress_hierarchy_as_prior
from .tape import Node

PHI_ESTIMATORS = ("naive", "stl", "dregs")
THETA_ESTIMATORS = ("naive", "gdregs")


@dataclass(frozen=True)
class EstimatorChoice:
    phi: str = "naive"
    theta: str = "naive"
    lam: str = "naive"

    def __post_init__(self):
        if self.phi not in PHI_ESTIMATORS:
            raise ValueError(f"phi estimator must be one of {PHI_ESTIMATORS}, got {self.phi!r}")
        if self.theta not in THETA_ESTIMATORS:
            raise ValueError(f"theta estimator must be one of {THETA_ESTIMATORS}, got {self.theta!r}")
        if self.lam != "naive":
            raise ValueError(f"lambda estimator must be 'naive', got {self.lam!r}")

    def for_group(self, group: str) -> str:
        return {"phi": self.phi, "theta": self.theta, "lambda": self.lam}[group]


def _keepdims(node: Node) -> Node:
    return T.reshape(node, node.shape + (1,))


def iwae_objective(log_w: Node) -> Node:
    """logsumexp(log_w) - log K over the last (importance sample) axis."""
    k = log_w.shape[-1]
    if k == 0:
        raise ValueError("the IWAE bound needs K >= 1")
    return T.logsumexp(log_w, axis=-1) - float(np.log(k))


def normalized_weights(log_w: Node) -> Node:
    """softmax over the last axis, behind a barrier."""
    if log_w.shape[-1] == 0:
        raise ValueError("need at least one weight")
    return T.stop_gradient(T.exp(log_w - _keepdims(T.logsumexp(log_w, axis=-1))))


def _live_log_w(bound: BoundModel, z) -> Node:
    key = ("log_w", tuple(n.id for n in z.values()))
    if key not in bound._cache:
        bound._cache[key] = log_weights(bound, z).log_w
    return bound._cache[key]


def surrogate_likelihood(bound: BoundModel, z: dict[str, Node]) -> Node:
    """Negative IWAE bound, no barriers."""
    return -T.sum(iwae_objective(_live_log_w(bound, z)))


def surrogate_phi(bound: BoundModel, z: dict[str, Node], estimator: str) -> Node:
    """Loss for the posterior weights; ``z`` must carry its reparameterized paths."""
    if estimator == "naive":
        return surrogate_likelihood(bound, z)
    if estimator not in ("stl", "dregs"):
        raise ValueError(f"unknown phi estimator {estimator!r}")
    log_w = log_weights(bound, z, q_stopped=True).log_w
    w = normalized_weights(log_w)
    if estimator == "dregs":
        w = T.square(w)
    return -T.sum(w * log_w)


def surrogate_theta(bound: BoundModel, z: dict[str, Node], estimator: str) -> Node:
    if estimator == "naive":
        return surrogate_likelihood(bound, z)
    if estimator != "gdregs":
        raise ValueError(f"unknown theta estimator {estimator!r}")
    z_p = reexpress_hierarchy_as_prior(bound, z)
    terms = log_weights(bound, z_p, p_stopped=True)
    w = normalized_weights(terms.log_w)
    return -T.sum(w * terms.log_lik - T.square(w) * terms.log_w)


def surrogate_losses(bound: BoundModel, eps: dict[int, np.ndarray], choice: EstimatorChoice,
                     groups=("lambda", "phi", "theta")) -> dict[str, Node]:
    """All requested surrogates on one tape, sharing the posterior samples."""
    z = q_sample_hierarchy(bound, eps)
    builders = {
        "lambda": lambda: surrogate_likelihood(bound, z),
        "phi": lambda: surrogate_phi(bound, z, choice.phi),
        "theta": lambda: surrogate_theta(bound, z, choice.theta),
    }
    return {g: builders[g]() for g in groups}


def grad_estimate(loss: Node, names) -> dict[str, np.ndarray]:
    """One estimator draw: minus the loss adjoint for each named parameter."""
    names = list(names)
    if not names:
        raise ValueError("empty parameter group")
    return {k: -v for k, v in T.backward(loss, names).items()}


@dataclass
class CrossEntropySurrogates:
    """Per-coordinate losses for estimating the gradient of E_q[log p] in p's parameters."""

    naive: Node
    gdregs: Node

    def cv(self, alpha) -> Node:
        """naive + alpha * (gdregs - naive), summed; ``alpha`` broadcasts per coordinate."""
        return T.sum(self.naive + (self.gdregs - self.naive) * alpha)


def cross_entropy_estimators(q: DiagGaussian, p: DiagGaussian, z) -> CrossEntropySurrogates:
    """Naive (-log p(z)) and GDReGs losses at samples ``z`` of q."""
    naive = -p.log_density(z)
    z_p = reparameterize_as_if_from(p, z)
    gdregs = -(q.with_stopped_params().log_density(z_p) - p.with_stopped_params().log_density(z_p))
    return CrossEntropySurrogates(naive, gdregs)
