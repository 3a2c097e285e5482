"""The two-layer linear Gaussian VAE used to compare estimator variance and SNR.

Generator: z2 ~ N(0, I), z1 | z2 ~ N(z2, I), x | z1 ~ N(z1, I). The model has a
learnable linear p(z1 | z2), a fixed N(0, I) top prior, a fixed unit-variance
likelihood centred on z1, and a bottom-up linear posterior q(z1 | x) q(z2 | z1).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tape as T
from ..estimators import iwae_objective, surrogate_likelihood
from ..model import LayerSpec, LikelihoodSpec, Model, ModelSpec, log_weights, q_sample_hierarchy
from .measure import gradient_stats
from .stats import GradStats, stream

log = logging.getLogger(__name__)

TOY_ESTIMATORS = {"phi": ("naive", "stl", "dregs"), "theta": ("naive", "gdregs")}


@dataclass
class ToyConfig:
    dim: int = 5
    n_data: int = 512
    ks: tuple = (1, 4, 16, 64, 256)
    lr: float = 1e-3
    batch_size: int = 64
    train_k: int = 16
    max_steps: int = 20_000
    tol: float = 1e-6
    check_every: int = 100
    n_reps: int = 1000
    measure_points: int = 4
    seed: int = 0


@dataclass
class TrainReport:
    steps: int
    converged: bool
    objective: float
    history: list = field(default_factory=list)


@dataclass
class ToyResult:
    config: ToyConfig
    training: TrainReport
    stats: dict  # (group, estimator, K) -> GradStats


def toy_spec(dim: int = 5) -> ModelSpec:
    return ModelSpec(
        x_dim=dim,
        layers=[
            LayerSpec(1, dim, q_parents=["x"], p_parents=["z2"]),
            LayerSpec(2, dim, q_parents=["z1"], p_parents=[], p_kind="standard"),
        ],
        likelihood=LikelihoodSpec(family="gaussian", parents=["z1"], kind="identity"),
    )


def toy_init(spec: ModelSpec, seed: int) -> Model:
    """Default fan-in init for the mean rows; scale rows start at zero weight and unit scale.

    Random scale weights would put some initial scales near zero, which makes
    the first SGD steps explode.
    """
    model = Model(spec, seed=seed)
    unit_raw = np.log(np.expm1(1.0))
    for name, value in model.params.items():
        half = value.shape[0] // 2
        if name.endswith(".w0"):
            value[half:] = 0.0
        else:
            value[:half], value[half:] = 0.0, unit_raw
    return model


def toy_data(n: int, dim: int, seed: int) -> np.ndarray:
    rng = stream(seed, 0)
    z2 = rng.standard_normal((n, dim))
    z1 = z2 + rng.standard_normal((n, dim))
    return z1 + rng.standard_normal((n, dim))


def objective(model: Model, x, k: int, rng: np.random.Generator) -> float:
    """Mean IWAE bound over the rows of ``x``."""
    tape = T.Tape()
    bound = model.bind(tape, x)
    z = q_sample_hierarchy(bound, model.noise(rng, x.shape[0], k))
    return float(np.mean(iwae_objective(log_weights(bound, z).log_w).value))


def sgd_train(model: Model, x: np.ndarray, cfg: ToyConfig) -> TrainReport:
    """Plain SGD on the naive IWAE gradient until the objective stops moving.

    Every ``check_every`` steps the full-data bound is evaluated with one fixed
    noise draw; training stops once its relative change falls below ``tol``.
    """
    n = x.shape[0]
    names = sorted(model.params)
    eval_noise_seed = (cfg.seed, 1)
    rng = stream(cfg.seed, 2)
    prev = objective(model, x, cfg.train_k, stream(*eval_noise_seed))
    history = [(0, prev)]
    step = 0
    while step < cfg.max_steps:
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        tape = T.Tape()
        bound = model.bind(tape, x[idx])
        z = q_sample_hierarchy(bound, model.noise(rng, len(idx), cfg.train_k))
        grads = T.backward(surrogate_likelihood(bound, z), names)
        for name in names:
            model.params[name] -= cfg.lr * grads[name] / len(idx)
        step += 1
        if step % cfg.check_every == 0:
            cur = objective(model, x, cfg.train_k, stream(*eval_noise_seed))
            history.append((step, cur))
            if not np.isfinite(cur):
                raise FloatingPointError(f"toy objective became {cur} at step {step} (seed {cfg.seed})")
            if abs(cur - prev) <= cfg.tol * abs(prev):
                return TrainReport(step, True, cur, history)
            prev = cur
    log.warning("toy training hit the step cap (%d) without converging", cfg.max_steps)
    return TrainReport(step, False, history[-1][1], history)


def run_toy_experiment(cfg: ToyConfig | None = None, model: Model | None = None) -> ToyResult:
    """Train the toy model, then measure every estimator at every K on the frozen result.

    Gradients are those of the mean bound over the first ``measure_points``
    datapoints; each (estimator, K) cell uses the same replicate noise streams.
    """
    cfg = cfg or ToyConfig()
    x = toy_data(cfg.n_data, cfg.dim, cfg.seed)
    if model is None:
        model = toy_init(toy_spec(cfg.dim), cfg.seed)
        report = sgd_train(model, x, cfg)
    else:
        report = TrainReport(0, False, objective(model, x, cfg.train_k, stream(cfg.seed, 1)))
    xm = x[:cfg.measure_points]
    stats: dict[tuple, GradStats] = {}
    for k in cfg.ks:
        for group, estimators in TOY_ESTIMATORS.items():
            for est in estimators:
                stats[(group, est, k)] = gradient_stats(model, xm, None, est, group, cfg.n_reps,
                                                        seed=cfg.seed + 1000, k=k)
    return ToyResult(cfg, report, stats)
