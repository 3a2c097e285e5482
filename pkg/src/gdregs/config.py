"""Experiment configuration: TOML (or a JSON sidecar) against a strict schema.

Every key has a default here; a resolved config always carries every key, so
it can be echoed next to the outputs and fed back in to repeat a run.
"""
from __future__ import annotations

import copy
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .estimators import PHI_ESTIMATORS, THETA_ESTIMATORS

COMMANDS = ("xent-oracle", "toy", "train", "offline-eval", "gradcheck", "identity-check")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "command": None,
    "seed": 0,
    "out": None,
    "estimators": {"phi": "naive", "theta": "naive"},
    "xent": {"n_pairs": 5, "dim": 4, "n_draws": 1_000_000, "equal_scales": False,
             "sigma_range": [0.3, 3.0], "mu_range": [-2.0, 2.0]},
    "toy": {"dim": 5, "n_data": 512, "K": [1, 4, 16, 64, 256], "lr": 1e-3, "batch_size": 64,
            "train_K": 16, "max_steps": 20_000, "tol": 1e-6, "check_every": 100,
            "n_reps": 1000, "measure_points": 4},
    "model": {"latent": 50, "layers": 1, "hidden": [300, 300], "conditional": True},
    "dataset": {"path": "", "test_path": "", "synthetic": True, "n_train": 2000, "n_test": 500, "rows": 28, "cols": 28},
    "train": {"epochs": 30, "batch_size": 64, "K": 8, "lr": 3e-4, "b1": 0.9, "b2": 0.999, "eps": 1e-8,
              "eval_every": 1, "grad_reps": 0, "grad_batch": 16, "checkpoints": []},
    "offline": {"K": 8, "n_reps": 200, "batch": 16, "epochs": [1, 30],
                "choices": [["naive", "naive"], ["dregs", "gdregs"]], "checkpoint_files": []},
    "gradcheck": {"n_graphs": 50, "h": 1e-5, "threshold": 1e-5},
    "identity": {"n": 100_000, "powers": [0, 1, 2], "n_pairs": 3},
}

# keys whose values are lists of this element type
_LIST_OF = {
    ("xent", "sigma_range"): float, ("xent", "mu_range"): float, ("toy", "K"): int,
    ("model", "hidden"): int, ("train", "checkpoints"): int, ("offline", "epochs"): int,
    ("offline", "choices"): list, ("offline", "checkpoint_files"): str, ("identity", "powers"): int,
}


def _check_type(path: str, value, default, elem=None):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if elem is float:
            return [_check_type(f"{path}[{i}]", v, 0.0) for i, v in enumerate(value)]
        if elem is int:
            return [_check_type(f"{path}[{i}]", v, 0) for i, v in enumerate(value)]
        if elem is str:
            return [_check_type(f"{path}[{i}]", v, "") for i, v in enumerate(value)]
        return [list(v) if isinstance(v, (list, tuple)) else v for v in value]
    raise ConfigError(f"{path}: unsupported default")  # pragma: no cover


def _merge(raw: dict, defaults: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key {path!r}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table, got {value!r}")
            out[key] = _merge(value, default, path + ".")
        else:
            section = prefix.rstrip(".")
            out[key] = _check_type(path, value, default, _LIST_OF.get((section, key)))
    return out


def _validate(cfg: dict) -> dict:
    if cfg["command"] is None:
        raise ConfigError("missing required field 'command'")
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"command: unknown command {cfg['command']!r}; choose from {', '.join(COMMANDS)}")
    if cfg["seed"] < 0:
        raise ConfigError("seed: must be non-negative")
    est = cfg["estimators"]
    if est["phi"] not in PHI_ESTIMATORS:
        raise ConfigError(f"estimators.phi: must be one of {PHI_ESTIMATORS}, got {est['phi']!r}")
    if est["theta"] not in THETA_ESTIMATORS:
        raise ConfigError(f"estimators.theta: must be one of {THETA_ESTIMATORS}, got {est['theta']!r}")
    for path, ks in (("toy.K", cfg["toy"]["K"]), ("toy.train_K", [cfg["toy"]["train_K"]]),
                     ("train.K", [cfg["train"]["K"]]), ("offline.K", [cfg["offline"]["K"]])):
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"{path}: the importance-sample count K must be at least 1")
    for path, n in (("toy.n_reps", cfg["toy"]["n_reps"]), ("offline.n_reps", cfg["offline"]["n_reps"])):
        if n < 2:
            raise ConfigError(f"{path}: need at least 2 repetitions")
    for pair in cfg["offline"]["choices"]:
        if (not isinstance(pair, list) or len(pair) != 2 or pair[0] not in PHI_ESTIMATORS
                or pair[1] not in THETA_ESTIMATORS):
            raise ConfigError(f"offline.choices: bad (phi, theta) pair {pair!r}")
    if cfg["train"]["batch_size"] < 1 or cfg["toy"]["batch_size"] < 1:
        raise ConfigError("batch_size: must be at least 1")
    return cfg


def resolve(raw: dict) -> dict:
    """Merge ``raw`` into the defaults, checking names and types."""
    return _validate(_merge(raw, DEFAULTS))


def load(path) -> dict:
    """Read a TOML config, or a JSON sidecar written next to earlier outputs."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        raw = raw.get("config", raw)
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    return raw


def apply_overrides(raw: dict, *, command=None, seed=None, out=None, k=None, phi=None, theta=None,
                    n_reps=None) -> dict:
    """Command-line flags layered over a file config (before resolution)."""
    raw = copy.deepcopy(raw)
    if command is not None:
        raw["command"] = command
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    if phi is not None:
        raw.setdefault("estimators", {})["phi"] = phi
    if theta is not None:
        raw.setdefault("estimators", {})["theta"] = theta
    if k is not None:
        raw.setdefault("toy", {})["K"] = [k]
        raw.setdefault("train", {})["K"] = k
        raw.setdefault("offline", {})["K"] = k
    if n_reps is not None:
        raw.setdefault("toy", {})["n_reps"] = n_reps
        raw.setdefault("offline", {})["n_reps"] = n_reps
        raw.setdefault("xent", {})["n_draws"] = n_reps
        raw.setdefault("identity", {})["n"] = n_reps
    return raw
