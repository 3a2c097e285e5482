"""Repeated estimator draws on a frozen model."""
from __future__ import annotations

import numpy as np

from ..estimators import surrogate_likelihood, surrogate_phi, surrogate_theta
from ..model import Model, q_sample_hierarchy
from ..tape import Tape, backward
from .stats import GradStats, stream, summarize

MEMORY_BUDGET = 1 << 18  # floats per replicated array in one chunk; a tape holds hundreds


def _width(model: Model) -> int:
    widths = [model.spec.x_dim, model.spec.c_dim]
    for layer in model.spec.layers:
        widths.append(2 * layer.dim)
        if "mlp" in (layer.q_kind, layer.p_kind):
            widths += list(layer.hidden)
    if model.spec.likelihood.kind == "mlp":
        widths += list(model.spec.likelihood.hidden)
    return max(widths)


def replicate_noise(model: Model, seed: int, r: int, batch: int, k: int) -> dict[int, np.ndarray]:
    rng = stream(seed, r)
    return {l: rng.standard_normal((batch, k, model.layers[l].dim)) for l in sorted(model.layers)}


def estimator_draws(model: Model, x, c, estimator: str, group: str, n_reps: int, seed: int, k: int,
                    chunk: int | None = None) -> np.ndarray:
    """``(n_reps, n_params)`` draws of ``estimator`` for ``group``.

    Each draw estimates the gradient of the batch-mean IWAE bound; parameters
    are flattened in sorted name order. Replicate ``r`` always uses noise
    stream ``(seed, r)``, so the draws do not depend on ``chunk``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch = x.shape[0]
    names = model.groups[group]
    if not names:
        raise ValueError(f"model has no {group} parameters")
    if chunk is None:
        # each replicate carries its own activations and a private copy of every
        # parameter; for large models that copy dominates and one replicate per
        # sweep (flat GEMMs) is both leaner and faster
        n_total = sum(v.size for v in model.params.values())
        chunk = max(1, MEMORY_BUDGET // (batch * k * _width(model) + 4 * n_total))
    build = {
        "lambda": lambda b, z: surrogate_likelihood(b, z),
        "phi": lambda b, z: surrogate_phi(b, z, estimator),
        "theta": lambda b, z: surrogate_theta(b, z, estimator),
    }[group]
    out = np.empty((n_reps, model.n_params(group)))
    for start in range(0, n_reps, chunk):
        reps = min(chunk, n_reps - start)
        per_rep = [replicate_noise(model, seed, start + i, batch, k) for i in range(reps)]
        eps = {l: np.stack([e[l] for e in per_rep]) for l in model.layers}
        tape = Tape()
        bound = model.bind(tape, x, c, replicas=reps)
        loss = build(bound, q_sample_hierarchy(bound, eps))
        grads = backward(loss, names)
        out[start:start + reps] = np.concatenate([-grads[n].reshape(reps, -1) for n in names], axis=1) / batch
    return out


def gradient_stats(model: Model, x, c, estimator: str, group: str, n_reps: int, seed: int, k: int,
                   chunk: int | None = None) -> GradStats:
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    return summarize(estimator_draws(model, x, c, estimator, group, n_reps, seed, k, chunk))
