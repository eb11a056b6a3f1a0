"""Command-line experiment runner.

Subcommands: generate | train | eval | ablate | baseline, all driven by one
JSON config (see `default_config`). Every command writes a manifest carrying
the fully resolved config, and reruns from a manifest reproduce outputs
byte for byte.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np

from . import __version__, serialize
from .datasets import (DataFormatError, TrajectoryDataset, load_csv, save_csv,
                       split_tags)
from .filters import (DegenerateLikelihoodError, ekf_step, kf_step,
                      run_gaussian, run_particle, ukf_step)
from .gated import (ABLATION_SCHEMES, GateDims, GateMask, filter_trajectory,
                    init_params, load_checkpoint, save_checkpoint)
from .linalg import CovarianceError, SingularMatrixError
from .metrics import mse_db, rmse
from .ssm import (GeometryError, linear_benchmark, linear_model,
                  lorenz_benchmark, lorenz_true_model, radar_benchmark,
                  radar_true_model, simulate)
from .training import (TrainConfig, TrainingDivergedError, evaluate,
                       initial_beliefs, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

PF_DEFAULT_N = 100
_PF_STREAM = 7

METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "gatedfilter metrics",
    "type": "object",
    "required": ["scenario", "seed", "methods"],
    "properties": {
        "scenario": {"type": "string"},
        "seed": {"type": "integer"},
        "methods": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"type": "string"},
                    "mse_db": {"type": ["number", "null"]},
                    "rmse_full": {"type": ["number", "null"]},
                    "rmse_position": {"type": ["number", "null"]},
                    "n_trajectories": {"type": ["integer", "null"]},
                    "error": {"type": "string"},
                },
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def default_config() -> dict:
    return {
        "scenario": {
            "name": "linear",
            "theta_deg": 10.0,
            "q": 0.3,
            "r": 1.0,
            "K": 20,
            "dt": 0.02,
            "j_true": 5,
            "j_nominal": 1,
            "sigma_d": 100.0,
            "sigma_mu_deg": 0.15,
            "omega_deg_s": 3.0,
        },
        "dataset": {
            "n_trajectories": 625,
            "fractions": [0.8, 0.08, 0.12],
            "seed": 1234,
            "csv_dir": None,
        },
        "model": {"d_c": None, "hidden": 32, "p0": 1.0},
        "train": {
            "learning_rate": 1e-3,
            "batch_size": 8,
            "epochs": 50,
            "tau": 1e-4,
            "grad_clip_norm": 10.0,
            "seed": 7,
            "early_stop_patience": 20,
            "n_jobs": 1,
        },
        "mask": {"use_mug": True, "use_spg": True, "use_sug": True},
        "baselines": None,
        "pf_particles": PF_DEFAULT_N,
        "out_dir": "runs/experiment",
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        raw = serialize.load(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]  # manifest rerun
    cfg = _merge(default_config(), raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    sc = cfg["scenario"]
    if sc["name"] not in ("linear", "lorenz", "cv_radar"):
        raise ConfigError(f"unknown scenario '{sc['name']}'")
    if sc["K"] < 1:
        raise ConfigError("scenario.K must be >= 1")
    ds = cfg["dataset"]
    if ds["csv_dir"] is not None and not Path(ds["csv_dir"]).is_dir():
        raise ConfigError(f"dataset.csv_dir does not exist: {ds['csv_dir']}")
    fr = ds["fractions"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("dataset.fractions must be three values summing to 1")
    tr = cfg["train"]
    if tr["learning_rate"] < 0 or tr["tau"] < 0 or tr["batch_size"] < 1:
        raise ConfigError("train: learning_rate/tau must be >= 0, batch_size >= 1")


def build_scenario(cfg: dict):
    sc = cfg["scenario"]
    if sc["name"] == "linear":
        return linear_benchmark(sc["theta_deg"], sc["q"], sc["r"], sc["K"])
    if sc["name"] == "lorenz":
        return lorenz_benchmark(sc["theta_deg"], sc["q"], sc["r"], sc["K"],
                                dt=sc["dt"], j_true=sc["j_true"],
                                j_nominal=sc["j_nominal"])
    return radar_benchmark(sc["q"], sc["sigma_d"], sc["sigma_mu_deg"], sc["K"],
                           dt=sc["dt"], omega_deg_s=sc["omega_deg_s"])


def build_true_model(cfg: dict):
    """Accurate-model counterpart of the scenario (for *_true baselines)."""
    sc = cfg["scenario"]
    if sc["name"] == "linear":
        return linear_model(0.0, sc["q"], sc["r"])
    if sc["name"] == "lorenz":
        return lorenz_true_model(sc["theta_deg"], sc["q"], sc["r"], dt=sc["dt"],
                                 j_true=sc["j_true"])
    return radar_true_model(sc["q"], sc["sigma_d"], sc["sigma_mu_deg"],
                            dt=sc["dt"], omega_deg_s=sc["omega_deg_s"])


def _default_baselines(name: str) -> list[str]:
    if name == "linear":
        return ["kf_true", "kf_nominal", "ekf", "ukf", "pf"]
    return ["ekf", "ukf", "pf", "pf_true"]


def _mask(cfg: dict) -> GateMask:
    m = cfg["mask"]
    return GateMask(bool(m["use_mug"]), bool(m["use_spg"]), bool(m["use_sug"]))


def _dims(cfg: dict, model) -> GateDims:
    return GateDims.for_model(model, d_c=cfg["model"]["d_c"],
                              hidden=cfg["model"]["hidden"])


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(learning_rate=t["learning_rate"],
                       batch_size=t["batch_size"], epochs=t["epochs"],
                       tau=t["tau"], grad_clip_norm=t["grad_clip_norm"],
                       seed=t["seed"],
                       early_stop_patience=t["early_stop_patience"])


def _n_jobs(cfg: dict) -> int:
    return max(1, int(cfg["train"]["n_jobs"]))


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, name: str, cfg: dict, command: str,
                    outputs: list[str]) -> Path:
    path = out / name
    serialize.dump({
        "tool": "gatedfilter",
        "version": __version__,
        "command": command,
        "outputs": outputs,
        "config": cfg,
    }, path)
    return path


def _load_dataset(cfg: dict) -> TrajectoryDataset:
    data_dir = Path(cfg["dataset"]["csv_dir"] or cfg["out_dir"])
    items, tags = [], []
    for split in ("train", "val", "test"):
        path = data_dir / f"{split}.csv"
        if not path.exists():
            continue
        loaded = load_csv(path)
        items.extend(loaded)
        tags.extend([split] * len(loaded))
    if not items:
        raise ConfigError(f"no train/val/test CSVs found under {data_dir}")
    return TrajectoryDataset(items, tags)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: dict) -> int:
    scenario, _ = build_scenario(cfg)
    ds_cfg = cfg["dataset"]
    n = ds_cfg["n_trajectories"]
    trajs = [simulate(scenario, [ds_cfg["seed"], i]) for i in range(n)]
    dataset = TrajectoryDataset(trajs, split_tags(n, ds_cfg["fractions"]))
    out = _out_dir(cfg)
    written = []
    for split in ("train", "val", "test"):
        path = out / f"{split}.csv"
        save_csv(path, dataset.split(split))
        written.append(path.name)
    _write_manifest(out, "manifest.json", cfg, "generate", written)
    counts = dataset.counts()
    print(f"generate: {n} trajectories (K={scenario.K}) -> {out} "
          f"[{counts['train']}/{counts['val']}/{counts['test']} train/val/test]")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _, nominal = build_scenario(cfg)
    # pin the resolved data location so manifest reruns read the same files
    cfg["dataset"]["csv_dir"] = str(Path(cfg["dataset"]["csv_dir"]
                                         or cfg["out_dir"]))
    dataset = _load_dataset(cfg)
    dims = _dims(cfg, nominal)
    params, report = train(_train_config(cfg), nominal, dataset, _mask(cfg),
                           dims, p0=cfg["model"]["p0"], n_jobs=_n_jobs(cfg))
    out = _out_dir(cfg)
    save_checkpoint(out / "checkpoint.json", params, dims)
    serialize.dump(report.to_payload(), out / "report.json")
    with open(out / "loss.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss,val_rmse\n")
        for row in report.epochs:
            fh.write(f"{row['epoch']},{serialize.format_float(row['train_loss'])},"
                     f"{serialize.format_float(row['val_loss'])},"
                     f"{serialize.format_float(row['val_rmse'])}\n")
    _write_manifest(out, "train_manifest.json", cfg, "train",
                    ["checkpoint.json", "report.json", "loss.csv"])
    print(f"train: best epoch {report.best_epoch} "
          f"(val loss {report.best_val_loss:.6g}) -> {out}")
    return EXIT_OK


def _method_entry(name: str, result: dict | None, error: str | None = None) -> dict:
    if error is not None:
        return {"name": name, "mse_db": None, "rmse_full": None,
                "rmse_position": None, "n_trajectories": None, "error": error}
    return {"name": name, "mse_db": result["mse_db"],
            "rmse_full": result["rmse_full"],
            "rmse_position": result["rmse_position"],
            "n_trajectories": result["n_trajectories"]}


def _gaussian_metrics(model, items, inits, position_idx, step, **kw) -> dict:
    est, tru = [], []
    for traj, init in zip(items, inits):
        means, _ = run_gaussian(model, traj.z[1:], init, step=step, **kw)
        est.append(means)
        tru.append(traj.x[1:])
    return {"mse_db": mse_db(est, tru), "rmse_full": rmse(est, tru),
            "rmse_position": rmse(est, tru, position_idx),
            "n_trajectories": len(items)}


def _particle_metrics(model, items, inits, position_idx, n_particles,
                      seed) -> dict:
    est, tru = [], []
    for i, (traj, init) in enumerate(zip(items, inits)):
        rng = np.random.default_rng([seed, _PF_STREAM, i])
        est.append(run_particle(model, traj.z[1:], init, n_particles, rng))
        tru.append(traj.x[1:])
    return {"mse_db": mse_db(est, tru), "rmse_full": rmse(est, tru),
            "rmse_position": rmse(est, tru, position_idx),
            "n_trajectories": len(items)}


def _write_metrics(out: Path, filename: str, cfg: dict, methods: list[dict]
                   ) -> None:
    serialize.dump({"scenario": cfg["scenario"]["name"],
                    "seed": cfg["dataset"]["seed"],
                    "methods": methods}, out / filename)
    serialize.dump(METRICS_SCHEMA, out / "metrics.schema.json")


def cmd_eval(cfg: dict, checkpoint_path) -> int:
    if checkpoint_path is None:
        checkpoint_path = Path(cfg["out_dir"]) / "checkpoint.json"
    scenario, nominal = build_scenario(cfg)
    try:
        params, dims = load_checkpoint(checkpoint_path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {checkpoint_path}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if (dims.d_x, dims.d_z) != (nominal.d_x, nominal.d_z):
        raise ConfigError(
            f"checkpoint dimensions (d_x={dims.d_x}, d_z={dims.d_z}) do not "
            f"match scenario (d_x={nominal.d_x}, d_z={nominal.d_z})")
    dataset = _load_dataset(cfg)
    items = dataset.split("test")
    if not items:
        raise ConfigError("no test split to evaluate")
    seed = cfg["dataset"]["seed"]
    result = evaluate(params, nominal, items, _mask(cfg),
                      p0=cfg["model"]["p0"], seed=seed,
                      position_idx=scenario.position_idx)
    out = _out_dir(cfg)
    _write_metrics(out, "metrics.json", cfg, [_method_entry("gated", result)])

    # per-trajectory dump: estimates in the x columns, measurements in z
    inits = initial_beliefs(items, cfg["model"]["p0"], seed)
    dumps = []
    for traj, init in zip(items, inits):
        run = filter_trajectory(params, nominal, traj.z[1:], init, _mask(cfg))
        est = np.vstack([init.mean, run.means_array()])
        dumps.append(type(traj)(est, traj.z))
    save_csv(out / "estimates.csv", dumps)
    print(f"eval: gated filter on {len(items)} test trajectories: "
          f"MSE {result['mse_db']:.2f} dB, RMSE {result['rmse_full']:.4g} -> {out}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    _, nominal = build_scenario(cfg)
    dataset = _load_dataset(cfg)
    items = dataset.split("test")
    if not items:
        raise ConfigError("no test split to evaluate")
    scenario, _ = build_scenario(cfg)
    dims = _dims(cfg, nominal)
    out = _out_dir(cfg)
    rows = []
    for scheme, mask in ABLATION_SCHEMES.items():
        params, report = train(_train_config(cfg), nominal, dataset, mask,
                               dims, p0=cfg["model"]["p0"], n_jobs=_n_jobs(cfg))
        result = evaluate(params, nominal, items, mask, p0=cfg["model"]["p0"],
                          seed=cfg["dataset"]["seed"],
                          position_idx=scenario.position_idx)
        save_checkpoint(out / f"checkpoint_{scheme}.json", params, dims)
        rows.append({"scheme": scheme, "rmse_full": result["rmse_full"],
                     "rmse_position": result["rmse_position"],
                     "mse_db": result["mse_db"],
                     "best_epoch": report.best_epoch})
        print(f"ablate[{scheme}]: RMSE {result['rmse_full']:.4g} "
              f"(position {result['rmse_position']:.4g})")
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("scheme,rmse_full,rmse_position,mse_db,best_epoch\n")
        for row in rows:
            fh.write(f"{row['scheme']},{serialize.format_float(row['rmse_full'])},"
                     f"{serialize.format_float(row['rmse_position'])},"
                     f"{serialize.format_float(row['mse_db'])},{row['best_epoch']}\n")
    _write_manifest(out, "ablation_manifest.json", cfg, "ablate",
                    ["ablation.csv"])
    return EXIT_OK


def cmd_baseline(cfg: dict) -> int:
    scenario, nominal = build_scenario(cfg)
    dataset = _load_dataset(cfg)
    items = dataset.split("test")
    if not items:
        raise ConfigError("no test split to evaluate")
    seed = cfg["dataset"]["seed"]
    inits = initial_beliefs(items, cfg["model"]["p0"], seed)
    pos = scenario.position_idx
    names = cfg["baselines"] or _default_baselines(scenario.name)
    n_pf = cfg["pf_particles"]

    methods = []
    for name in names:
        try:
            if name == "kf_true":
                result = _gaussian_metrics(build_true_model(cfg), items, inits,
                                           pos, kf_step)
            elif name == "kf_nominal":
                result = _gaussian_metrics(nominal, items, inits, pos, kf_step)
            elif name == "ekf":
                result = _gaussian_metrics(nominal, items, inits, pos, ekf_step)
            elif name == "ekf_true":
                result = _gaussian_metrics(build_true_model(cfg), items, inits,
                                           pos, ekf_step)
            elif name == "ukf":
                result = _gaussian_metrics(nominal, items, inits, pos, ukf_step)
            elif name == "ukf_true":
                result = _gaussian_metrics(build_true_model(cfg), items, inits,
                                           pos, ukf_step)
            elif name == "pf":
                result = _particle_metrics(nominal, items, inits, pos, n_pf, seed)
            elif name == "pf_true":
                result = _particle_metrics(build_true_model(cfg), items, inits,
                                           pos, n_pf, seed)
            else:
                raise ConfigError(f"unknown baseline '{name}'")
            methods.append(_method_entry(name, result))
            print(f"baseline[{name}]: MSE {result['mse_db']:.2f} dB")
        except (ValueError, SingularMatrixError, CovarianceError,
                DegenerateLikelihoodError) as exc:
            if isinstance(exc, ConfigError):
                raise
            methods.append(_method_entry(name, None, error=str(exc)))
            print(f"baseline[{name}]: error: {exc}")
    out = _out_dir(cfg)
    _write_metrics(out, "metrics_baseline.json", cfg, methods)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedfilter",
        description="Experiment runner: scenario generation, gated-filter "
                    "training, evaluation, ablation, and classical baselines.")
    parser.add_argument("command",
                        choices=["generate", "train", "eval", "ablate",
                                 "baseline"])
    parser.add_argument("--config", required=True,
                        help="experiment config or manifest JSON")
    parser.add_argument("--checkpoint", default=None,
                        help="checkpoint path (eval)")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override dataset and training seeds")
    return parser


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.out is not None:
        cfg["out_dir"] = args.out
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint)
    if args.command == "ablate":
        return cmd_ablate(cfg)
    return cmd_baseline(cfg)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularMatrixError, CovarianceError, TrainingDivergedError,
            DegenerateLikelihoodError, GeometryError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
