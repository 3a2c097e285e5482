"""Command-line entry point: ``gdregs <command> [--config file] [overrides]``.

Each command writes CSV files to the output directory, each with a
``<name>.meta.json`` sidecar holding the resolved config. Passing a sidecar
back as ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .analytic import GaussPair, gdregs_moments, naive_moments, optimal_cv
from .config import COMMANDS, ConfigError
from .data import IdxError, load_idx, synthetic_strokes
from .estimators import EstimatorChoice
from .harness.identities import dregs_identity, gdregs_identity
from .harness.stats import stream, summarize
from .harness.toy import ToyConfig, run_toy_experiment
from .harness.train import (AdamConfig, ImageData, TrainConfig, image_model_spec, offline_estimator_eval,
                            train)
from .harness.xent import xent_gradient_draws
from .model import Model
from .tape import finite_difference_check, random_graph

log = logging.getLogger("gdregs")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4, 5
OUT_ENV = "GDREGS_OUT"
GRAD_COLUMNS = ["command", "dataset", "K", "phi_estimator", "theta_estimator", "group", "epoch_or_step",
                "avg_variance", "avg_snr", "n_reps", "seed"]


class DataError(Exception):
    pass


class CheckFailed(Exception):
    pass


class Outputs:
    """CSV writer that drops a metadata sidecar next to every file."""

    def __init__(self, directory: Path, cfg: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.written: list[Path] = []

    def metadata(self) -> dict:
        return {"config": self.cfg, "seed": self.cfg["seed"], "version": __version__}

    def _sidecar(self, path: Path):
        path.with_name(path.name + ".meta.json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))

    def csv(self, name: str, columns: list, rows) -> Path:
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([_cell(row[c]) for c in columns])
        self._sidecar(path)
        self.written.append(path)
        return path

    def npz(self, name: str, arrays: dict) -> Path:
        path = self.dir / name
        np.savez(path, **arrays)
        self.written.append(path)
        return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# --- commands -------------------------------------------------------------

def cmd_xent_oracle(cfg: dict, out: Outputs) -> None:
    """Closed-form moments of the cross-entropy gradient estimators vs Monte Carlo."""
    xc, seed = cfg["xent"], cfg["seed"]
    rng = stream(seed, 0)
    rows = []
    for i in range(xc["n_pairs"]):
        pair = GaussPair.random(rng, xc["dim"], sigma=tuple(xc["sigma_range"]), mu=tuple(xc["mu_range"]))
        if xc["equal_scales"]:
            pair = GaussPair(pair.mu_q, pair.sigma_q, pair.mu_p, pair.sigma_q.copy())
        draws = xent_gradient_draws(pair, xc["n_draws"], seed=seed + 1 + i)
        cv = optimal_cv(pair)
        naive, gd = naive_moments(pair), gdregs_moments(pair)
        analytic = {("naive", "mu"): (naive[0].expectation, naive[0].variance),
                    ("naive", "sigma"): (naive[1].expectation, naive[1].variance),
                    ("gdregs", "mu"): (gd[0].expectation, gd[0].variance),
                    ("gdregs", "sigma"): (gd[1].expectation, gd[1].variance),
                    ("cv", "mu"): (naive[0].expectation, cv.residual_var_mu),
                    ("cv", "sigma"): (naive[1].expectation, cv.residual_var_sigma)}
        for (est, param), (mean, var) in analytic.items():
            st = summarize(draws[(est, param)])
            for d in range(xc["dim"]):
                rows.append({"pair": i, "coord": d, "sigma_q": pair.sigma_q[d], "sigma_p": pair.sigma_p[d],
                             "param": param, "estimator": est, "analytic_mean": mean[d],
                             "analytic_variance": var[d], "mc_mean": st.mean[d], "mc_variance": st.variance[d],
                             "n": st.n, "seed": seed})
    out.csv("xent_oracle.csv", ["pair", "coord", "sigma_q", "sigma_p", "param", "estimator", "analytic_mean",
                                "analytic_variance", "mc_mean", "mc_variance", "n", "seed"], rows)


def cmd_toy(cfg: dict, out: Outputs) -> None:
    tc = cfg["toy"]
    toy = ToyConfig(dim=tc["dim"], n_data=tc["n_data"], ks=tuple(tc["K"]), lr=tc["lr"],
                    batch_size=tc["batch_size"], train_k=tc["train_K"], max_steps=tc["max_steps"], tol=tc["tol"],
                    check_every=tc["check_every"], n_reps=tc["n_reps"], measure_points=tc["measure_points"],
                    seed=cfg["seed"])
    result = run_toy_experiment(toy)
    if not result.training.converged:
        log.warning("toy: reporting measurements from an unconverged model (%d steps)", result.training.steps)
    rows = []
    for (group, est, k), st in sorted(result.stats.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
        rows.append({"command": "toy", "dataset": f"toy-linear-d{toy.dim}", "K": k,
                     "phi_estimator": est if group == "phi" else "", "theta_estimator": est if group == "theta" else "",
                     "group": group, "epoch_or_step": result.training.steps, "avg_variance": st.avg_variance,
                     "avg_snr": st.avg_snr, "n_reps": st.n, "seed": cfg["seed"]})
    out.csv("toy_grad_stats.csv", GRAD_COLUMNS, rows)
    out.csv("toy_training.csv", ["step", "objective", "converged"],
            [{"step": s, "objective": v, "converged": result.training.converged}
             for s, v in result.training.history])


def load_dataset(cfg: dict) -> tuple[ImageData, str]:
    dc, seed = cfg["dataset"], cfg["seed"]
    try:
        if dc["path"]:
            handle = load_idx(dc["path"])
            if dc["test_path"]:
                test = load_idx(dc["test_path"])
                train_img, test_img = handle.images[:dc["n_train"]], test.images[:dc["n_test"]]
            else:
                n = dc["n_train"] + dc["n_test"]
                if handle.images.shape[0] < n:
                    raise DataError(f"{dc['path']} holds {handle.images.shape[0]} images, need {n}")
                train_img, test_img = handle.images[:dc["n_train"]], handle.images[dc["n_train"]:n]
            name = Path(dc["path"]).stem
        elif dc["synthetic"]:
            rows_, cols = dc["rows"], dc["cols"]
            handle = synthetic_strokes(dc["n_train"], stream(seed, 100, 0), rows=rows_, cols=cols)
            train_img = handle.images
            test_img = synthetic_strokes(dc["n_test"], stream(seed, 100, 1), rows=rows_, cols=cols).images
            name = "synthetic-strokes"
        else:
            raise DataError("dataset: give a path or set synthetic = true")
    except (IdxError, OSError) as err:
        raise DataError(str(err)) from err
    split = handle.split if cfg["model"]["conditional"] else None
    return ImageData(train_img, test_img, split), name


def _spec_for(cfg: dict, data: ImageData):
    mc = cfg["model"]
    d = data.train.shape[1]
    c_dim = data.split or 0
    return image_model_spec(d - c_dim, c_dim, latent=mc["latent"], n_layers=mc["layers"], hidden=tuple(mc["hidden"]))


def _train_config(cfg: dict, checkpoints=()) -> TrainConfig:
    tc = cfg["train"]
    return TrainConfig(epochs=tc["epochs"], batch_size=tc["batch_size"], k=tc["K"],
                       adam=AdamConfig(tc["lr"], tc["b1"], tc["b2"], tc["eps"]), eval_every=tc["eval_every"],
                       grad_reps=tc["grad_reps"], grad_batch=tc["grad_batch"],
                       checkpoint_epochs=tuple(sorted(set(tc["checkpoints"]) | set(checkpoints))),
                       seed=cfg["seed"])


def _run_training(cfg: dict, data: ImageData, choice: EstimatorChoice, out_dir, checkpoints=()):
    spec = _spec_for(cfg, data)
    model = Model(spec, seed=cfg["seed"])
    return spec, train(model, data, choice, _train_config(cfg, checkpoints), out_dir=out_dir)


def _param_dump(params: dict, phi: str, theta: str, epoch: int) -> dict:
    arrays = {k: v for k, v in params.items()}
    arrays["__meta__"] = np.array(json.dumps({"phi": phi, "theta": theta, "epoch": epoch}))
    return arrays


def cmd_train(cfg: dict, out: Outputs) -> None:
    data, name = load_dataset(cfg)
    est = cfg["estimators"]
    choice = EstimatorChoice(est["phi"], est["theta"])
    _, result = _run_training(cfg, data, choice, out.dir)
    tag = f"{est['phi']}-{est['theta']}"
    out.csv("train_log.csv", ["epoch", "train_objective", "test_objective", "phi_estimator", "theta_estimator",
                              "K", "seed"],
            [{"epoch": e.epoch, "train_objective": e.train_objective, "test_objective": e.test_objective,
              "phi_estimator": est["phi"], "theta_estimator": est["theta"], "K": cfg["train"]["K"],
              "seed": cfg["seed"]} for e in result.logs])
    grad_rows = [{"command": "train", "dataset": name, "K": cfg["train"]["K"], "phi_estimator": est["phi"],
                  "theta_estimator": est["theta"], "group": g, "epoch_or_step": e.epoch, "avg_variance": v,
                  "avg_snr": s, "n_reps": cfg["train"]["grad_reps"], "seed": cfg["seed"]}
                 for e in result.logs for g, (v, s) in sorted(e.grad_stats.items())]
    out.csv("train_grad_stats.csv", GRAD_COLUMNS, grad_rows)
    for epoch, params in sorted(result.checkpoints.items()):
        out.npz(f"params_{tag}_epoch{epoch}.npz", _param_dump(params, est["phi"], est["theta"], epoch))
    out.npz(f"params_{tag}_final.npz", _param_dump(result.model.params, est["phi"], est["theta"],
                                                   cfg["train"]["epochs"]))


def _load_checkpoint(path: str):
    try:
        with np.load(path) as f:
            meta = json.loads(str(f["__meta__"]))
            params = {k: f[k] for k in f.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from err
    return (meta["phi"], meta["theta"], int(meta["epoch"])), params


def cmd_offline_eval(cfg: dict, out: Outputs) -> None:
    oc = cfg["offline"]
    data, name = load_dataset(cfg)
    spec = _spec_for(cfg, data)
    checkpoints = {}
    if oc["checkpoint_files"]:
        for path in oc["checkpoint_files"]:
            key, params = _load_checkpoint(path)
            checkpoints[key] = params
    else:
        for phi, theta in oc["choices"]:
            _, result = _run_training(cfg, data, EstimatorChoice(phi, theta), out.dir, checkpoints=oc["epochs"])
            for epoch in oc["epochs"]:
                if epoch in result.checkpoints:
                    checkpoints[(phi, theta, epoch)] = result.checkpoints[epoch]
                else:
                    log.warning("offline-eval: epoch %d is past the training run; skipped", epoch)
    rows = offline_estimator_eval(checkpoints, spec, data, oc["K"], oc["n_reps"], seed=cfg["seed"], batch=oc["batch"])
    out.csv("offline_eval.csv", GRAD_COLUMNS + ["trained_phi", "trained_theta"],
            [{"command": "offline-eval", "dataset": name, "K": oc["K"],
              "phi_estimator": r.evaluated_with if r.group == "phi" else "",
              "theta_estimator": r.evaluated_with if r.group == "theta" else "", "group": r.group,
              "epoch_or_step": r.epoch, "avg_variance": r.avg_variance, "avg_snr": r.avg_snr,
              "n_reps": oc["n_reps"], "seed": cfg["seed"], "trained_phi": r.trained_with[0],
              "trained_theta": r.trained_with[1]} for r in rows])


def cmd_gradcheck(cfg: dict, out: Outputs) -> None:
    gc = cfg["gradcheck"]
    rows = []
    for i in range(gc["n_graphs"]):
        f, x0 = random_graph(cfg["seed"] * 100_003 + i)
        err = finite_difference_check(f, x0, h=gc["h"])
        rows.append({"graph": i, "n_inputs": x0.size, "max_rel_error": err, "passed": err < gc["threshold"]})
    out.csv("gradcheck.csv", ["graph", "n_inputs", "max_rel_error", "passed"], rows)
    worst = max(r["max_rel_error"] for r in rows) if rows else 0.0
    log.info("gradcheck: worst relative error %.3e over %d graphs", worst, len(rows))
    if not all(r["passed"] for r in rows):
        raise CheckFailed(f"gradcheck: worst relative error {worst:.3e} exceeds {gc['threshold']:.1e}")


def cmd_identity_check(cfg: dict, out: Outputs) -> None:
    ic, xc, seed = cfg["identity"], cfg["xent"], cfg["seed"]
    rng = stream(seed, 0)
    rows = []
    for i in range(ic["n_pairs"]):
        q = (rng.uniform(*xc["mu_range"]), rng.uniform(*xc["sigma_range"]))
        p = (rng.uniform(*xc["mu_range"]), rng.uniform(*xc["sigma_range"]))
        for power in ic["powers"]:
            sub = seed + 1 + 10 * i + power
            for res in (dregs_identity(*q, power, ic["n"], sub), gdregs_identity(q, p, power, ic["n"], sub)):
                for j, param in enumerate(("mean", "scale")):
                    rows.append({"pair": i, "identity": res.kind, "power": power, "param": param,
                                 "lhs": res.lhs_mean[j], "rhs": res.rhs_mean[j], "std_error": res.se[j],
                                 "z": res.z[j], "passed": abs(res.z[j]) < 4.0, "n": res.n})
    out.csv("identity_check.csv", ["pair", "identity", "power", "param", "lhs", "rhs", "std_error", "z",
                                   "passed", "n"], rows)
    if not all(r["passed"] for r in rows):
        raise CheckFailed("identity-check: at least one identity differs by 4 or more standard errors")


HANDLERS = {"xent-oracle": cmd_xent_oracle, "toy": cmd_toy, "train": cmd_train, "offline-eval": cmd_offline_eval,
            "gradcheck": cmd_gradcheck, "identity-check": cmd_identity_check}


def dispatch(cfg: dict, out_dir=None) -> int:
    """Run a resolved config; returns the process exit code."""
    command = cfg["command"]
    directory = Path(out_dir or cfg["out"] or os.environ.get(OUT_ENV) or "gdregs_out") / command
    try:
        HANDLERS[command](cfg, Outputs(directory, cfg))
    except CheckFailed as err:
        log.error("%s", err)
        return EXIT_CHECK
    except DataError as err:
        log.error("%s: data error: %s", command, err)
        return EXIT_DATA
    except FloatingPointError as err:
        log.error("%s: numerical failure: %s", command, err)
        return EXIT_NUMERIC
    except ConfigError as err:
        log.error("%s: %s", command, err)
        return EXIT_USAGE
    log.info("%s: outputs in %s", command, directory)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdregs", description="Gradient-estimator experiments for hierarchical VAEs.")
    ap.add_argument("command", nargs="?", help=f"one of: {', '.join(COMMANDS)} (or set 'command' in the config)")
    ap.add_argument("--config", help="TOML config, or a .meta.json sidecar from an earlier run")
    ap.add_argument("--seed", type=int, help="master seed")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./gdregs_out)")
    ap.add_argument("--K", dest="k", type=int, help="importance samples")
    ap.add_argument("--phi-est", choices=("naive", "stl", "dregs"))
    ap.add_argument("--theta-est", choices=("naive", "gdregs"))
    ap.add_argument("--n-reps", type=int, help="Monte-Carlo draws per measurement")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is not None and args.command not in COMMANDS:
        ap.print_usage(sys.stderr)
        print(f"gdregs: unknown command {args.command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        raw = cfgmod.load(args.config) if args.config else {}
        raw = cfgmod.apply_overrides(raw, command=args.command, seed=args.seed, out=args.out, k=args.k,
                                     phi=args.phi_est, theta=args.theta_est, n_reps=args.n_reps)
        cfg = cfgmod.resolve(raw)
    except ConfigError as err:
        ap.print_usage(sys.stderr)
        print(f"gdregs: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return dispatch(cfg)
    except Exception as err:  # noqa: BLE001 - report any other failure with the command name
        log.exception("%s failed", cfg["command"])
        print(f"gdregs {cfg['command']}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
