"""Hierarchical VAEs with arbitrary posterior and prior dependency DAGs.

Array layout: latents and noise have shape ``(R, B, K, D)``, meaning
replicate, datapoint, importance sample, feature. ``R`` is 1 unless the model
is bound with per-replicate parameter copies, which is how the harness gets one
gradient per Monte-Carlo draw from a single reverse sweep. Data ``x`` and
context ``c`` enter as ``(1, B, 1, D)`` and broadcast.

Parents are named ``"x"``, ``"c"`` or ``"z<l>"``. Parameters are named
``q<l>.*`` (group phi), ``p<l>.*`` (group theta) and ``lik.*`` (group lambda).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter

import numpy as np

from . import tape as T
from .distributions import (
    BernoulliLikelihood, DiagGaussian, UnitGaussianLikelihood, positive_scale,
    reparameterize_as_if_from, standard_normal,
)
from .tape import Node, Tape

CONDITIONER_KINDS = ("linear", "mlp", "standard", "identity")
GROUP_OF_ROLE = {"q": "phi", "p": "theta", "lik": "lambda"}
GROUPS = ("phi", "theta", "lambda")
_LATENT = re.compile(r"^z(\d+)$")


@dataclass
class LayerSpec:
    """One stochastic layer: its size, parents under q and p, and conditioner kinds."""

    index: int
    dim: int
    q_parents: list = field(default_factory=list)
    p_parents: list = field(default_factory=list)
    q_kind: str = "linear"
    p_kind: str = "linear"
    hidden: tuple = (300, 300)


@dataclass
class LikelihoodSpec:
    family: str = "bernoulli"  # or "gaussian" (unit variance)
    parents: list | None = None  # default: every latent in index order
    kind: str = "mlp"
    hidden: tuple = (300, 300)


@dataclass
class ModelSpec:
    x_dim: int
    layers: list
    likelihood: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    c_dim: int = 0


def topological_order(parents: dict[int, list[int]], what: str) -> list[int]:
    """Layer indices ordered so parents come first; ties broken by index."""
    sorter = TopologicalSorter()
    for l in sorted(parents):
        sorter.add(l, *sorted(parents[l]))
    try:
        order = list(sorter.static_order())
    except CycleError as err:
        raise ValueError(f"cyclic {what}-graph: {err.args[1]}") from None
    return [l for l in order if l in parents]


class Conditioner:
    """Maps concatenated parent values to distribution parameters.

    ``n_out`` is the output width: twice the latent dim for Gaussian layers
    (mean and raw scale), the data dim for a likelihood.
    """

    def __init__(self, prefix: str, kind: str, in_dims: list[int], n_out: int, hidden=(300, 300)):
        if kind not in CONDITIONER_KINDS:
            raise ValueError(f"unknown conditioner kind {kind!r}")
        self.prefix, self.kind, self.n_out = prefix, kind, n_out
        self.in_dim = int(sum(in_dims))
        self.hidden = tuple(hidden) if kind == "mlp" else ()
        if kind == "mlp" and not in_dims:
            raise ValueError(f"{prefix}: an mlp conditioner needs at least one parent")
        if kind == "standard" and in_dims:
            raise ValueError(f"{prefix}: a standard-normal layer cannot have parents")
        if kind == "identity" and self.in_dim != n_out:
            raise ValueError(f"{prefix}: identity conditioner maps {self.in_dim} inputs to {n_out} outputs")

    def shapes(self) -> dict[str, tuple]:
        if self.kind in ("standard", "identity"):
            return {}
        if self.in_dim == 0:
            return {f"{self.prefix}.b0": (self.n_out,)}
        sizes = [self.in_dim, *self.hidden, self.n_out]
        out = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out[f"{self.prefix}.w{i}"] = (b, a)
            out[f"{self.prefix}.b{i}"] = (b,)
        return out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.shapes().items():
            if len(shape) == 2:
                params[name] = rng.normal(size=shape) / np.sqrt(shape[1])
            else:
                params[name] = np.zeros(shape)
        return params

    def __call__(self, get, inputs: list[Node]) -> Node:
        """``get(name)`` returns the (possibly stopped) parameter node."""
        if self.kind == "identity":
            return inputs[0] if len(inputs) == 1 else T.concat(inputs)
        if self.in_dim == 0:
            return get(f"{self.prefix}.b0")
        h = inputs[0] if len(inputs) == 1 else T.concat(inputs)
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = T.affine(get(f"{self.prefix}.w{i}"), h, get(f"{self.prefix}.b{i}"))
            if i < n_layers - 1:
                h = T.tanh(h)
        return h


class Model:
    """Hierarchical VAE: parameter values plus structure.

    Args:
        spec: the structure.
        params: parameter values; drawn from the default initialization when omitted.
        seed: seed for that initialization.
    """

    def __init__(self, spec: ModelSpec, params: dict | None = None, seed: int = 0):
        self.spec = spec
        self.layers = {layer.index: layer for layer in spec.layers}
        if len(self.layers) != len(spec.layers):
            raise ValueError("duplicate layer index")
        self.dims = {"x": spec.x_dim, "c": spec.c_dim}
        for layer in spec.layers:
            self.dims[f"z{layer.index}"] = layer.dim
        for layer in spec.layers:
            for role, parents in (("q", layer.q_parents), ("p", layer.p_parents)):
                for name in parents:
                    self._check_parent(name, layer.index, role)
        self.q_order = topological_order({l: self._latent_parents(s.q_parents) for l, s in self.layers.items()}, "q")
        self.p_order = topological_order({l: self._latent_parents(s.p_parents) for l, s in self.layers.items()}, "p")

        self.conditioners: dict[tuple, Conditioner] = {}
        for l, s in self.layers.items():
            if s.q_kind == "standard":
                raise ValueError(f"layer {l}: the posterior must be learnable")
            self.conditioners[("q", l)] = Conditioner(
                f"q{l}", s.q_kind, [self.dims[p] for p in s.q_parents], 2 * s.dim, s.hidden)
            self.conditioners[("p", l)] = Conditioner(
                f"p{l}", s.p_kind, [self.dims[p] for p in s.p_parents], 2 * s.dim, s.hidden)
        lik = spec.likelihood
        if lik.family not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood family {lik.family!r}")
        self.lik_parents = list(lik.parents) if lik.parents is not None else [f"z{l}" for l in sorted(self.layers)]
        for name in self.lik_parents:
            self._check_parent(name, None, "lik")
        self.conditioners[("lik", None)] = Conditioner(
            "lik", lik.kind, [self.dims[p] for p in self.lik_parents], spec.x_dim, lik.hidden)

        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for key in sorted(self.conditioners, key=lambda k: (k[0], -1 if k[1] is None else k[1])):
                params.update(self.conditioners[key].init(rng))
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        expected = {n: s for c in self.conditioners.values() for n, s in c.shapes().items()}
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names mismatch: missing {sorted(set(expected) - set(self.params))}, "
                             f"unexpected {sorted(set(self.params) - set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def _check_parent(self, name: str, layer: int | None, role: str):
        if name not in self.dims or (name == "c" and self.spec.c_dim == 0):
            raise ValueError(f"{role}{layer if layer is not None else ''}: unknown parent {name!r}")
        if layer is not None and name == f"z{layer}":
            raise ValueError(f"{role}{layer}: a layer cannot be its own parent")
        if role == "p" and name == "x":
            raise ValueError(f"p{layer}: the prior cannot depend on x")

    @staticmethod
    def _latent_parents(parents) -> list[int]:
        return [int(m.group(1)) for m in map(_LATENT.match, parents) if m]

    @property
    def groups(self) -> dict[str, list[str]]:
        out = {g: [] for g in GROUPS}
        for name in sorted(self.params):
            out[GROUP_OF_ROLE[name.split(".")[0].rstrip("0123456789")]].append(name)
        return out

    def n_params(self, group: str) -> int:
        return int(sum(self.params[n].size for n in self.groups[group]))

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape, x, c=None, replicas: int | None = None) -> "BoundModel":
        return BoundModel(self, tape, x, c, replicas)

    def noise(self, rng: np.random.Generator, batch: int, k: int, replicas: int = 1) -> dict[int, np.ndarray]:
        return {l: rng.standard_normal((replicas, batch, k, self.layers[l].dim)) for l in sorted(self.layers)}


def as_rows(x) -> np.ndarray:
    """``(B, D)`` data to the ``(1, B, 1, D)`` layout."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    return x[None, :, None, :]


class BoundModel:
    """A model whose parameters are leaves on ``tape``.

    With ``replicas=R`` every parameter becomes an ``(R, ...)`` leaf holding R
    identical copies; replicate ``r`` of the noise only touches copy ``r``, so
    the leaf adjoint's row ``r`` is that replicate's gradient.

    Conditioner outputs are cached per (parameter view, input nodes), so the
    surrogates built on one tape share forward work.
    """

    def __init__(self, model: Model, tape: Tape, x, c=None, replicas: int | None = None):
        self.model, self.tape, self.replicas = model, tape, replicas
        self.live: dict[str, Node] = {}
        for name in sorted(model.params):
            value = model.params[name]
            if replicas is not None:
                value = np.broadcast_to(value, (replicas,) + value.shape)
            self.live[name] = tape.parameter(value, name)
        self._stopped: dict[str, Node] = {}
        self._cache: dict[tuple, Node] = {}
        self.x = tape.constant(as_rows(x))
        if self.x.shape[-1] != model.spec.x_dim:
            raise ValueError(f"x has {self.x.shape[-1]} features, model expects {model.spec.x_dim}")
        self.c = None
        if model.spec.c_dim:
            if c is None:
                raise ValueError("model has a context input but no c was given")
            self.c = tape.constant(as_rows(c))
            if self.c.shape[-1] != model.spec.c_dim:
                raise ValueError(f"c has {self.c.shape[-1]} features, model expects {model.spec.c_dim}")

    def param(self, name: str, stopped: bool = False) -> Node:
        node = self.live[name]
        if not stopped:
            return node
        if name not in self._stopped:
            self._stopped[name] = T.stop_gradient(node)
        return self._stopped[name]

    def _conditioned(self, role: str, layer, inputs: list[Node], stopped: bool) -> Node:
        key = (role, layer, stopped, tuple(n.id for n in inputs))
        if key not in self._cache:
            cond = self.model.conditioners[(role, layer)]
            out = cond(lambda name: self.param(name, stopped), inputs)
            if self.replicas is not None and cond.kind != "identity" and cond.in_dim == 0:
                out = T.reshape(out, (self.replicas, 1, 1, out.shape[-1]))
            self._cache[key] = out
        return self._cache[key]

    def _inputs(self, parents, values: dict[str, Node]) -> list[Node]:
        out = []
        for name in parents:
            if name == "x":
                out.append(self.x)
            elif name == "c":
                out.append(self.c)
            else:
                out.append(values[name])
        return out

    def _gaussian(self, role: str, l: int, parents, values, stopped: bool) -> DiagGaussian:
        layer = self.model.layers[l]
        kind = layer.q_kind if role == "q" else layer.p_kind
        if kind == "standard":
            return standard_normal(self.tape, layer.dim)
        out = self._conditioned(role, l, self._inputs(parents, values), stopped)
        mean, raw = out[..., :layer.dim], out[..., layer.dim:]
        return DiagGaussian(mean, positive_scale(raw),
                            stopped=None if stopped else (lambda: self._gaussian(role, l, parents, values, True)))

    def q_dist(self, l: int, values: dict[str, Node], stopped: bool = False) -> DiagGaussian:
        """q(z_l | pa_alpha(l)); ``stopped`` cuts the weights, not the parents."""
        return self._gaussian("q", l, self.model.layers[l].q_parents, values, stopped)

    def p_dist(self, l: int, values: dict[str, Node], stopped: bool = False) -> DiagGaussian:
        return self._gaussian("p", l, self.model.layers[l].p_parents, values, stopped)

    def likelihood(self, values: dict[str, Node]):
        out = self._conditioned("lik", None, self._inputs(self.model.lik_parents, values), False)
        if self.model.spec.likelihood.family == "bernoulli":
            return BernoulliLikelihood(out)
        return UnitGaussianLikelihood(out)


@dataclass
class WeightTerms:
    log_w: Node  # (R, B, K)
    log_lik: Node


def q_sample_hierarchy(bound: BoundModel, eps: dict[int, np.ndarray]) -> dict[str, Node]:
    """Reparameterized ancestral sampling in posterior-topological order."""
    z: dict[str, Node] = {}
    for l in bound.model.q_order:
        z[f"z{l}"] = bound.q_dist(l, z).sample_reparam(eps[l])
    return z


def log_weights(bound: BoundModel, z: dict[str, Node], q_stopped: bool = False,
                p_stopped: bool = False) -> WeightTerms:
    """log p(x|z) + sum_l log p(z_l|pa_beta) - sum_l log q(z_l|pa_alpha).

    ``q_stopped`` / ``p_stopped`` evaluate the respective densities with the
    network weights behind a barrier; parent latents keep their paths.
    """
    log_lik = bound.likelihood(z).log_prob(bound.x)
    log_w = log_lik
    for l in bound.model.p_order:
        log_w = log_w + bound.p_dist(l, z, p_stopped).log_prob(z[f"z{l}"])
    for l in bound.model.q_order:
        log_w = log_w - bound.q_dist(l, z, q_stopped).log_prob(z[f"z{l}"])
    return WeightTerms(log_w, log_lik)


def reexpress_hierarchy_as_prior(bound: BoundModel, z: dict[str, Node]) -> dict[str, Node]:
    """Top-down in prior order, map each z_l to T_p(stop(T_p^{-1}(z_l))).

    Each prior conditional is evaluated at the already re-expressed parents, so
    the new paths run through theta and through the prior's parents.
    """
    out: dict[str, Node] = {}
    for l in bound.model.p_order:
        merged = {**z, **out}
        out[f"z{l}"] = reparameterize_as_if_from(bound.p_dist(l, merged), z[f"z{l}"])
    return out
