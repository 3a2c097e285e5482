"""Exact IWAE gradients for tiny models by tensor-product Gauss-Hermite quadrature.

The reparameterized IWAE bound is an expectation over K * sum(latent dims)
standard normal noise coordinates. Differentiating the quadrature sum node by
node gives the exact gradient of the quadrature approximation of the bound.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .. import tape as T
from ..estimators import iwae_objective
from ..model import Model, log_weights, q_sample_hierarchy

MAX_NODES = 1 << 22


def gauss_hermite_grid(n_dims: int, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes ``(n_nodes**n_dims, n_dims)`` and weights summing to one for N(0, I)."""
    if n_nodes ** n_dims > MAX_NODES:
        raise ValueError(f"{n_nodes}^{n_dims} quadrature nodes is too many")
    x, w = hermegauss(n_nodes)
    w = w / w.sum()
    nodes = np.array(list(itertools.product(x, repeat=n_dims)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=n_dims))), axis=1)
    return nodes, weights


def quadrature_iwae_gradient(model: Model, x, k: int, n_nodes: int = 20, chunk: int = 1 << 16):
    """Exact gradient (dict by parameter name) of the IWAE bound at a single datapoint ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValueError("quadrature oracle takes one datapoint")
    layers = sorted(model.layers)
    dims = [model.layers[l].dim for l in layers]
    n_dims = k * sum(dims)
    nodes, weights = gauss_hermite_grid(n_dims, n_nodes)
    total = {name: np.zeros_like(v) for name, v in model.params.items()}
    value = 0.0
    for start in range(0, len(nodes), chunk):
        block = nodes[start:start + chunk]
        wts = weights[start:start + chunk]
        n = len(block)
        # node coordinates laid out as (k, layer, feature)
        eps, offset = {}, 0
        per_k = block.reshape(n, k, sum(dims))
        for l, d in zip(layers, dims):
            eps[l] = per_k[:, :, offset:offset + d][None]
            offset += d
        tape = T.Tape()
        bound = model.bind(tape, np.repeat(x, n, axis=0))
        z = q_sample_hierarchy(bound, eps)
        obj = iwae_objective(log_weights(bound, z).log_w)
        value += float(np.sum(obj.value[0] * wts))
        grads = T.backward(T.sum(obj * wts[None]), sorted(model.params))
        for name, g in grads.items():
            total[name] += g
    return value, total
