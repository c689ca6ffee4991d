"""Command-line entry points: simulate, fit, oracle, compare.

Configuration is one JSON document; any key can be overridden by the flag
of the same name. Exit codes: 0 success, 2 usage or configuration error,
3 numeric failure.
"""
import argparse
import importlib.util
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io, oracle, trainer
from .autodiff import AutodiffError
from .flows import SaturationError
from .models import BUILTIN, ModelError, ModelSpec, SimulationError, simulate, with_steps

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

DEFAULT_THETA = {"ou": [0.2, 5.0, 1.0], "sir": [0.0022, 0.45, 5.0]}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "ou"
    custom_model: str = None  # python file defining MODEL, used when model == "custom"
    data: str = None
    out: str = "."
    seed: int = None
    theta: list = None  # simulate only; natural scale
    n_steps: int = None
    dt: float = None
    # training
    n: int = 50
    m: int = 5
    k: int = 10
    lr: float = 1e-3
    iters: int = 10_000
    alpha0: float = 4.0
    horizon_frac: float = 0.25
    window: int = 500
    threshold: float = 0.01
    hidden: int = 20
    depth: int = 5
    theta_layers: int = 5
    early_stop: bool = True
    path_draws: int = 50
    theta_draws: int = 4000
    # oracle
    mh_iters: int = 60_000
    mh_burn_in: int = 10_000
    exact: bool = True
    # compare
    fit_dir: str = None
    oracle_dir: str = None
    bins: int = 40

    def train_config(self):
        keys = set(trainer.TrainConfig.field_names())
        return trainer.TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})


_TYPES = {"int": int, "float": float, "str": str, "bool": None, "list": None}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list: {text!r}") from None


def _flag_type(f):
    name = f.type if isinstance(f.type, str) else f.type.__name__
    return {"int": int, "float": float, "str": str, "bool": _parse_bool, "list": _parse_list}[name]


def _env_seed():
    raw = os.environ.get("SSMFLOW_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SSMFLOW_SEED must be an integer, got {raw!r}") from None


def resolve_config(config_path, overrides):
    """Defaults, then the JSON document, then flags."""
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {config_path} does not exist")
        try:
            values = io.read_json(path)
        except ValueError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    if values.get("seed") is None:
        values["seed"] = _env_seed()
    config = RunConfig(**values)
    if config.model not in BUILTIN and config.model != "custom":
        raise ConfigError(f"unknown model {config.model!r}")
    if config.model == "custom" and not config.custom_model:
        raise ConfigError("model 'custom' needs custom_model")
    for key in ("data", "custom_model", "fit_dir", "oracle_dir"):
        value = getattr(config, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{key} path {value} does not exist")
    return config


def build_model(config):
    if config.model == "custom":
        spec = importlib.util.spec_from_file_location("ssmflow_custom_model", config.custom_model)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        model = getattr(module, "MODEL", None)
        if not isinstance(model, ModelSpec):
            raise ConfigError(f"{config.custom_model} must define MODEL as a ModelSpec")
    else:
        kwargs = {}
        if config.dt is not None:
            kwargs["dt"] = config.dt
        model = BUILTIN[config.model](**kwargs)
    if config.n_steps is not None:
        model = with_steps(model, config.n_steps)
    return model


def _load_data(config, model):
    path = config.data
    if path is None and model.name == "sir":
        path = io.boarding_school_path()
    if path is None:
        raise ConfigError("a dataset is required (--data)")
    obs = io.read_dataset(path, model.dt, config.n_steps)
    if obs.values.shape[1] != model.obs_dim:
        raise ConfigError(f"dataset has {obs.values.shape[1]} columns, model expects {model.obs_dim}")
    return with_steps(model, obs.n_steps), obs


def _out_dir(config):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_simulate(config):
    model = build_model(config)
    theta = config.theta if config.theta is not None else DEFAULT_THETA.get(model.name)
    if theta is None or len(theta) != model.n_params:
        raise ConfigError(f"theta must have {model.n_params} entries")
    scheme = "exact-ou" if model.name == "ou" else "euler-maruyama"
    path, obs = simulate(model, np.asarray(theta, dtype=float), scheme, seed=config.seed)
    out = _out_dir(config)
    io.write_dataset(out / "data.csv", obs, model.dt)
    io.write_path(out / "latent_truth.csv", path, model.state_names)
    return {"data": str(out / "data.csv"), "latent_truth": str(out / "latent_truth.csv")}


def cmd_fit(config):
    model, obs = _load_data(config, build_model(config))
    train_config = config.train_config()
    report, family = trainer.train(model, obs, train_config)
    out = _out_dir(config)
    family.save(out, "weights")
    document = report.to_dict()
    document["run_config"] = asdict(config)
    document["model"] = model.name
    document["n_steps"] = int(obs.n_steps)
    io.write_json(out / "report.json", document)

    names = list(model.param_names)
    draws = trainer.posterior_sample(family, config.theta_draws, [config.seed, 1])
    header = ["draw"] + [f"vartheta_{n}" for n in names] + names + ["log_q_theta"]
    rows = [
        [i] + list(draws["vartheta"][i]) + list(draws["theta"][i]) + [draws["log_q_theta"][i]]
        for i in range(config.theta_draws)
    ]
    io.write_table(out / "theta_samples.csv", header, rows)

    paths = trainer.posterior_sample(family, config.path_draws, [config.seed, 2])["path"]
    times = model.times
    rows = [
        [d, times[i]] + list(paths[d, i]) for d in range(config.path_draws) for i in range(len(times))
    ]
    io.write_table(out / "path_samples.csv", ["draw", "time"] + list(model.state_names), rows)
    return {"iterations": report.iterations, "out": str(out)}


def cmd_oracle(config):
    model = build_model(config)
    if model.name != "ou":
        raise ConfigError(f"oracle supports only the OU model, not {model.name!r}")
    model, obs = _load_data(config, model)
    chain = oracle.rwmh_posterior(
        obs, model, iters=config.mh_iters, burn_in=config.mh_burn_in, seed=config.seed,
        exact=config.exact,
    )
    out = _out_dir(config)
    theta = chain.theta
    io.write_table(
        out / "chain.csv",
        ["iter"] + list(model.param_names),
        [[i] + list(row) for i, row in enumerate(theta)],
    )
    summary = chain.summary(model)
    summary["run_config"] = asdict(config)
    io.write_json(out / "summary.json", summary)
    return summary


def _load_theta(directory):
    directory = Path(directory)
    if (directory / "theta_samples.csv").exists():
        header, rows = io.read_table(directory / "theta_samples.csv")
        cols = [i for i, h in enumerate(header) if h.startswith("vartheta_")]
        names = [header[i][len("vartheta_") :] for i in cols]
        values = np.array([[float(r[i]) for i in cols] for r in rows]).reshape(len(rows), len(cols))
        return names, values, False
    if (directory / "chain.csv").exists():
        header, rows = io.read_table(directory / "chain.csv")
        values = np.array([[float(c) for c in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
        return header[1:], values, True
    raise ConfigError(f"{directory} has neither theta_samples.csv nor chain.csv")


def cmd_compare(config):
    if not config.fit_dir or not config.oracle_dir:
        raise ConfigError("compare needs fit_dir and oracle_dir")
    model = build_model(config)
    names_a, vi, natural_a = _load_theta(config.fit_dir)
    names_b, mh, natural_b = _load_theta(config.oracle_dir)
    if vi.shape[1] != mh.shape[1] or vi.shape[1] != model.n_params:
        raise ConfigError(
            f"parameter dimensions differ: {vi.shape[1]} vs {mh.shape[1]} (model {model.n_params})"
        )
    # chains are stored on the natural scale; compare on the unconstrained one
    if natural_a:
        vi = model.to_unconstrained(vi)
    if natural_b:
        mh = model.to_unconstrained(mh)
    result = {"parameters": {}, "run_config": asdict(config)}
    rows = []
    for j, name in enumerate(model.param_names):
        a, b = vi[:, j], mh[:, j]
        mean_a, sd_a = float(a.mean()), float(a.std(ddof=1))
        mean_b, sd_b = float(b.mean()), float(b.std(ddof=1))
        result["parameters"][name] = {
            "vi_mean": mean_a,
            "vi_sd": sd_a,
            "mh_mean": mean_b,
            "mh_sd": sd_b,
            "standardised_gap": abs(mean_a - mean_b) / sd_b,
            "sd_ratio": sd_a / sd_b,
        }
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, config.bins + 1)
        count_a, _ = np.histogram(a, edges)
        count_b, _ = np.histogram(b, edges)
        width = edges[1] - edges[0]
        for i in range(config.bins):
            rows.append([
                name, edges[i], edges[i + 1], int(count_a[i]), int(count_b[i]),
                count_a[i] / (a.size * width), count_b[i] / (b.size * width),
            ])
    out = _out_dir(config)
    io.write_json(out / "comparison.json", result)
    io.write_table(
        out / "marginals.csv",
        ["parameter", "bin_left", "bin_right", "vi_count", "mh_count", "vi_density", "mh_density"],
        rows,
    )
    return result


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "oracle": cmd_oracle,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ssmflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON run configuration")
        for f in fields(RunConfig):
            cmd.add_argument(f"--{f.name}", dest=f.name, type=_flag_type(f), default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        config = resolve_config(args.config, overrides)
        COMMANDS[args.command](config)
    except (ConfigError, ModelError, TypeError) as exc:
        print(f"ssmflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ssmflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingError, SaturationError, SimulationError, AutodiffError,
            oracle.StuckChainError, FloatingPointError) as exc:
        print(f"ssmflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
