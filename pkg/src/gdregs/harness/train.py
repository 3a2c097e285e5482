"""Desk-scale training of image VAEs with Adam, plus offline estimator comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tape as T
from ..estimators import PHI_ESTIMATORS, THETA_ESTIMATORS, EstimatorChoice, iwae_objective, surrogate_losses
from ..model import LayerSpec, LikelihoodSpec, Model, ModelSpec, log_weights, q_sample_hierarchy
from .measure import gradient_stats
from .stats import stream

log = logging.getLogger(__name__)

# stream keys under the master seed
_INIT, _BINARIZE, _SHUFFLE, _NOISE, _EVAL, _GRADSTATS = range(6)


@dataclass
class AdamConfig:
    lr: float = 3e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


class Adam:
    """Adam that ascends: ``update`` takes objective gradients."""

    def __init__(self, params: dict, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.state = OptimizerState({k: np.zeros_like(v) for k, v in params.items()},
                                    {k: np.zeros_like(v) for k, v in params.items()})

    def update(self, params: dict, grads: dict):
        c, s = self.config, self.state
        s.step += 1
        bias1, bias2 = 1 - c.b1 ** s.step, 1 - c.b2 ** s.step
        for name, g in grads.items():
            s.m[name] = c.b1 * s.m[name] + (1 - c.b1) * g
            s.v[name] = c.b2 * s.v[name] + (1 - c.b2) * g * g
            params[name] += c.lr * (s.m[name] / bias1) / (np.sqrt(s.v[name] / bias2) + c.eps)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ImageData:
    """Intensities in [0, 1]; ``split`` columns of context come first when given."""

    train: np.ndarray
    test: np.ndarray
    split: int | None = None

    def parts(self, images: np.ndarray):
        if self.split is None:
            return images, None
        return images[:, self.split:], images[:, :self.split]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    k: int = 8
    adam: AdamConfig = field(default_factory=AdamConfig)
    eval_every: int = 1
    eval_k: int | None = None
    grad_reps: int = 0  # gradient-variance draws per evaluation; 0 skips
    grad_batch: int = 16
    checkpoint_epochs: tuple = ()
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    train_objective: float
    test_objective: float
    grad_stats: dict = field(default_factory=dict)  # group -> (avg variance, avg SNR)


@dataclass
class TrainResult:
    model: Model
    logs: list
    checkpoints: dict  # epoch -> parameter dict


def image_model_spec(x_dim: int, c_dim: int = 0, latent: int = 50, n_layers: int = 1,
                     hidden=(300, 300)) -> ModelSpec:
    """The MLP VAE of the image experiments: bottom-up posterior, top-down prior.

    Without context the top prior is N(0, I); with context every prior layer
    and the likelihood also see c, and the top prior is learned from c.
    """
    ctx = ["c"] if c_dim else []
    layers = []
    for l in range(1, n_layers + 1):
        q_par = (["x"] + ctx) if l == 1 else [f"z{l - 1}"] + ctx
        p_par = [f"z{l + 1}"] + ctx if l < n_layers else list(ctx)
        p_kind = "mlp" if p_par else "standard"
        layers.append(LayerSpec(l, latent, q_par, p_par, q_kind="mlp", p_kind=p_kind, hidden=hidden))
    lik = LikelihoodSpec(family="bernoulli", parents=["z1"] + ctx, kind="mlp", hidden=hidden)
    return ModelSpec(x_dim=x_dim, layers=layers, likelihood=lik, c_dim=c_dim)


def binarize(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli pixels with the intensities as probabilities."""
    return (rng.random(images.shape) < images).astype(np.float64)


def mean_objective(model: Model, x, c, k: int, rng: np.random.Generator, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        xs = x[start:start + chunk]
        cs = None if c is None else c[start:start + chunk]
        bound = model.bind(T.Tape(), xs, cs)
        z = q_sample_hierarchy(bound, model.noise(rng, xs.shape[0], k))
        total += float(np.sum(iwae_objective(log_weights(bound, z).log_w).value))
    return total / x.shape[0]


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def _dump_batch(out_dir, seed, epoch, step, x, c):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_seed{seed}_epoch{epoch}_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, x=x, c=np.zeros(0) if c is None else c)
    return path


def train(model: Model, data: ImageData, choice: EstimatorChoice, cfg: TrainConfig,
          out_dir=None, on_epoch=None) -> TrainResult:
    """Adam on the three surrogate losses with dynamic binarization each epoch.

    Each group gets the gradient of the batch-mean objective from its chosen
    estimator. Logs train and test objectives (IWAE bound at the training K
    unless ``eval_k`` is set) every ``eval_every`` epochs.
    """
    if cfg.batch_size < 1:
        raise ValueError("batch size must be at least 1")
    groups = {g: names for g, names in model.groups.items() if names}
    opt = Adam(model.params, cfg.adam)
    seed = cfg.seed
    test_bin = binarize(data.test, stream(seed, _BINARIZE, 0))
    x_test, c_test = data.parts(test_bin)
    n = data.train.shape[0]
    logs, checkpoints = [], {}
    if 0 in cfg.checkpoint_epochs:
        checkpoints[0] = {k: v.copy() for k, v in model.params.items()}
    for epoch in range(1, cfg.epochs + 1):
        train_bin = binarize(data.train, stream(seed, _BINARIZE, epoch))
        x_all, c_all = data.parts(train_bin)
        order = stream(seed, _SHUFFLE, epoch).permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = x_all[idx]
            cb = None if c_all is None else c_all[idx]
            bound = model.bind(T.Tape(), xb, cb)
            eps = model.noise(stream(seed, _NOISE, epoch, step), len(idx), cfg.k)
            losses = surrogate_losses(bound, eps, choice, tuple(groups))
            grads = {}
            for g, names in groups.items():
                loss = losses[g]
                if not np.isfinite(loss.value):
                    path = _dump_batch(out_dir, seed, epoch, step, xb, cb)
                    raise TrainingDiverged(
                        f"non-finite {g} loss at epoch {epoch}, step {step}, seed {seed}; "
                        f"batch rows {idx[:8].tolist()}..." + (f" dumped to {path}" if path else ""))
                for name, adj in T.backward(loss, names).items():
                    grads[name] = -adj / len(idx)
            opt.update(model.params, grads)
        if epoch in cfg.checkpoint_epochs:
            checkpoints[epoch] = {k: v.copy() for k, v in model.params.items()}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            k_eval = cfg.eval_k or cfg.k
            entry = EpochLog(
                epoch,
                mean_objective(model, x_all, c_all, k_eval, stream(seed, _EVAL, 0)),
                mean_objective(model, x_test, c_test, k_eval, stream(seed, _EVAL, 1)),
            )
            if cfg.grad_reps >= 2:
                xg = x_all[:cfg.grad_batch]
                cg = None if c_all is None else c_all[:cfg.grad_batch]
                for g in groups:
                    st = gradient_stats(model, xg, cg, choice.for_group(g), g, cfg.grad_reps,
                                        seed=_derived_seed(seed, _GRADSTATS, epoch), k=cfg.k)
                    entry.grad_stats[g] = (st.avg_variance, st.avg_snr)
            logs.append(entry)
            log.info("epoch %d train %.4f test %.4f", epoch, entry.train_objective, entry.test_objective)
            if on_epoch is not None:
                on_epoch(entry)
    return TrainResult(model, logs, checkpoints)


@dataclass
class OfflineRow:
    trained_with: tuple  # (phi, theta) estimators used in training
    epoch: int
    group: str
    evaluated_with: str
    avg_variance: float
    avg_snr: float


def offline_estimator_eval(checkpoints: dict, spec: ModelSpec, data: ImageData, k: int, n_reps: int,
                           seed: int, batch: int = 16) -> list[OfflineRow]:
    """Every estimator on every frozen checkpoint.

    ``checkpoints`` maps (phi, theta, epoch) to parameters. Each cell uses the
    same data batch and noise streams, so rows do not depend on evaluation order.
    """
    x_bin = binarize(data.train[:batch], stream(seed, _BINARIZE, 10_000))
    x, c = data.parts(x_bin)
    rows = []
    for (phi, theta, epoch), params in sorted(checkpoints.items()):
        model = Model(spec, params)
        for group, estimators in (("phi", PHI_ESTIMATORS), ("theta", THETA_ESTIMATORS)):
            if not model.groups[group]:
                continue
            for est in estimators:
                st = gradient_stats(model, x, c, est, group, n_reps, seed=seed, k=k)
                rows.append(OfflineRow((phi, theta), epoch, group, est, st.avg_variance, st.avg_snr))
    return rows
