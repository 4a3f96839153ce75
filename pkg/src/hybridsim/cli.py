"""Command-line harness: gen-data, train, eval, sample, gradcheck.

Every run reads one INI file (sections ``run``, ``data``, ``model``,
``train``, ``eval``, ``sample``); each key can be overridden with a flag of
the same name, e.g. ``--train.iterations 500``. The resolved config, the
seeds and the package version are written into the output directory.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import platform
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import data, dcvrnn, diffengine, eval as ev, models
from .core import BALL, PUSH
from .physics import BallParams, Engine, PushParams

OUTPUT_ENV = "HYBRIDSIM_OUTPUT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"[{field}] {message}")
        self.field = field


# ---------------------------------------------------------------------------
# schema: section -> key -> (parser, default)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _pos_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError(f"must be a positive integer, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise ValueError(f"must be positive, got {v}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _fraction(s: str) -> float:
    v = float(s)
    if not 0 < v <= 1:
        raise ValueError(f"must lie in (0, 1], got {v}")
    return v


def _optional_int(s: str):
    return None if s.strip().lower() in ("", "none", "full") else _pos_int(s)


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return v

    return parse


def _models_list(s: str) -> list[str]:
    out = [m.strip().lower() for m in s.split(",") if m.strip()]
    bad = [m for m in out if m not in models.KINDS]
    if bad or not out:
        raise ValueError(f"expected a comma list of {', '.join(models.KINDS)}, got {s!r}")
    return out


def _path(s: str) -> str:
    return s.strip()


# a default given as a dict depends on run.scenario
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "scenario": (_choice(BALL, PUSH), "ball"),
        "output_dir": (_path, ""),
        "seed": (_nonneg_int, "0"),
        "workers": (_pos_int, "1"),
    },
    "data": {
        "path": (_path, ""),
        "n_train": (_pos_int, {BALL: "800", PUSH: "6500"}),
        "n_test": (_nonneg_int, {BALL: "100", PUSH: "628"}),
        "fraction": (_fraction, "1.0"),
        "perturb": (_bool, "true"),
        "push_dt": (_pos_float, "0.05"),
        "push_mode": (_choice("varied", "repeated"), "varied"),
        "c_bias": (_pos_float, "0.7"),
        "c_log_std": (_nonneg_float, "0.1"),
        "field_amplitude": (_nonneg_float, "0.1"),
    },
    "model": {
        "kind": (_choice(models.NEURAL, models.HYBRID), "hybrid"),
        "delta": (_bool, "true"),
        "hidden_size": (_pos_int, "16"),
        "num_layers": (_pos_int, "2"),
        "init_seed": (_nonneg_int, "0"),
    },
    "train": {
        "lr": (_pos_float, "1e-3"),
        "decay_every": (_pos_int, "2500"),
        "decay_factor": (_fraction, "0.5"),
        "iterations": (_pos_int, "10000"),
        "batch_size": (_pos_int, "100"),
        "max_seq_len": (_optional_int, {BALL: "none", PUSH: "150"}),
        "l2": (_nonneg_float, "1e-5"),
    },
    "eval": {
        "models": (_models_list, "zero,physics,neural,hybrid"),
        "neural_checkpoint": (_path, ""),
        "hybrid_checkpoint": (_path, ""),
        "n_samples": (_pos_int, "10"),
        "horizon": (_optional_int, "none"),
        "split": (_choice("train", "test"), "test"),
    },
    "sample": {
        "checkpoint": (_path, ""),
        "trajectory": (_nonneg_int, "0"),
        "n_samples": (_pos_int, "200"),
    },
}


@dataclass
class RunConfig:
    values: dict  # section -> key -> parsed value
    raw: dict  # section -> key -> string as given

    def __getitem__(self, item: str):
        section, key = item.split(".")
        return self.values[section][key]

    @property
    def scenario(self) -> str:
        return self.values["run"]["scenario"]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, kv in self.raw.items():
            cp[section] = kv
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def load_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    """Read the INI file, apply ``section.key`` overrides, and validate every field."""
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
    scenario = overrides.get("run.scenario") or cp.get("run", "scenario", fallback=SCHEMA["run"]["scenario"][1])
    raw: dict[str, dict[str, str]] = {}
    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        raw[section], values[section] = {}, {}
        for key, (parse, default) in keys.items():
            name = f"{section}.{key}"
            if isinstance(default, dict):
                default = default.get(scenario.strip().lower(), next(iter(default.values())))
            text = overrides.get(name)
            if text is None:
                text = cp.get(section, key, fallback=default)
            try:
                values[section][key] = parse(text)
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
            raw[section][key] = text
    if not values["run"]["output_dir"]:
        root = os.environ.get(OUTPUT_ENV, "runs")
        values["run"]["output_dir"] = raw["run"]["output_dir"] = str(Path(root) / values["run"]["scenario"])
    return RunConfig(values, raw)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def persist_run(cfg: RunConfig, out: Path, command: str, seeds: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config_{command}.ini").write_text(cfg.to_ini())
    prov = {
        "command": command,
        "seeds": seeds,
        "version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / f"provenance_{command}.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared pieces


def gen_config(cfg: RunConfig):
    d = cfg.values["data"]
    if cfg.scenario == BALL:
        return data.BallGenConfig(n_train=d["n_train"], n_test=d["n_test"], perturb=d["perturb"])
    return data.PushGenConfig(
        n_train=d["n_train"],
        n_test=d["n_test"],
        perturb=d["perturb"],
        dt=d["push_dt"],
        mode=d["push_mode"],
        c_bias=d["c_bias"],
        c_log_std=d["c_log_std"],
        field_amplitude=d["field_amplitude"],
    )


def engine_from_dataset(ds) -> Engine:
    """The nominal engine recorded in the dataset header."""
    e = ds.meta.get("engine")
    if not e:
        raise ConfigError("data.path", "dataset carries no engine description; regenerate it with gen-data")
    if ds.scenario == BALL:
        return Engine(BALL, BallParams(e["radius"], e["gravity"], e["restitution"], e["dt"], e.get("rest_speed", 1e-3)))
    return Engine(PUSH, PushParams(c=e["c"], mu_contact=e["mu_contact"], half_extents=tuple(e["half_extents"]), dt=e["dt"]))


def _dataset_path(cfg: RunConfig) -> Path:
    p = cfg["data.path"]
    return Path(p) if p else Path(cfg["run.output_dir"]) / "dataset.jsonl"


def _load_dataset(cfg: RunConfig):
    path = _dataset_path(cfg)
    if not path.is_file():
        raise ConfigError("data.path", f"dataset not found: {path} (run gen-data first)")
    ds = data.load(path)
    if ds.scenario != cfg.scenario:
        raise ConfigError("run.scenario", f"dataset {path} holds {ds.scenario!r} trajectories")
    return ds


def _load_model(path: str, field: str) -> dcvrnn.DCVRNN:
    if not path:
        raise ConfigError(field, "no checkpoint given")
    if not Path(path).is_file():
        raise ConfigError(field, f"checkpoint not found: {path}")
    return dcvrnn.DCVRNN.load(path)


def schedule_from(cfg: RunConfig) -> dcvrnn.TrainSchedule:
    t = cfg.values["train"]
    return dcvrnn.TrainSchedule(t["lr"], t["decay_every"], t["decay_factor"], t["iterations"], t["batch_size"], t["max_seq_len"], t["l2"])


def model_config_from(cfg: RunConfig) -> dcvrnn.DCVRNNConfig:
    m = cfg.values["model"]
    make = dcvrnn.DCVRNNConfig.ball if cfg.scenario == BALL else dcvrnn.DCVRNNConfig.push
    use_physics = m["kind"] == models.HYBRID
    return make(
        hidden_size=m["hidden_size"], num_layers=m["num_layers"], use_physics=use_physics, delta=m["delta"] and use_physics
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    gcfg = gen_config(cfg)
    seed = cfg["run.seed"]
    gen = data.gen_ball_dataset if cfg.scenario == BALL else data.gen_push_dataset
    ds = gen(gcfg, seed, workers=cfg["run.workers"])
    path = _dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save(ds, path)
    persist_run(cfg, out, "gen-data", {"data": seed})
    print(f"wrote {len(ds)} trajectories to {path}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = _load_dataset(cfg)
    train_set = data.split(ds, "train")
    if cfg["data.fraction"] < 1:
        train_set = data.subsample(train_set, cfg["data.fraction"], cfg["run.seed"])
    engine = engine_from_dataset(ds)
    sched = schedule_from(cfg)
    print(f"schedule: {sched.describe()}")
    kind = cfg["model.kind"]
    model = dcvrnn.DCVRNN.from_dataset(model_config_from(cfg), train_set, seed=cfg["model.init_seed"])
    persist_run(cfg, out, "train", {"train": cfg["run.seed"], "init": cfg["model.init_seed"]})
    every = max(1, sched.iterations // 20)
    t0 = time.time()

    def log(it, loss):
        if it % every == 0 or it == sched.iterations - 1:
            print(f"iter {it:6d}  loss {loss:.6g}  ({time.time() - t0:.0f}s)", flush=True)

    res = dcvrnn.train(model, train_set, sched, seed=cfg["run.seed"], engine=engine, log=log)
    ckpt = out / f"{kind}.ckpt"
    res.model.save(ckpt)
    with open(out / f"{kind}_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "kl", "nll"])
        for i, row in enumerate(zip(res.losses, res.kl, res.nll)):
            w.writerow([i] + [repr(x) for x in row])
    print(f"wrote {ckpt}")


def _predictors(cfg: RunConfig, engine: Engine) -> list[models.Predictor]:
    out = []
    for kind in cfg["eval.models"]:
        model = None
        if kind in (models.NEURAL, models.HYBRID):
            model = _load_model(cfg[f"eval.{kind}_checkpoint"], f"eval.{kind}_checkpoint")
        try:
            out.append(models.Predictor(kind, engine, model))
        except models.ConfigurationError as exc:
            raise ConfigError(f"eval.{kind}_checkpoint", str(exc)) from None
    return out


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    ds = _load_dataset(cfg)
    engine = engine_from_dataset(ds)
    preds = _predictors(cfg, engine)
    trajs = list(data.split(ds, cfg["eval.split"]))
    persist_run(cfg, out, "eval", {"eval": cfg["run.seed"]})
    report = ev.run_experiment(preds, trajs, cfg["eval.n_samples"], cfg["run.seed"], cfg["eval.split"], cfg["eval.horizon"])
    table, summary = report.save(out)
    print(report.to_table(), end="")
    print(f"wrote {table} and {summary}")


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    ds = _load_dataset(cfg)
    engine = engine_from_dataset(ds)
    model = _load_model(cfg["sample.checkpoint"], "sample.checkpoint")
    kind = models.HYBRID if model.config.use_physics else models.NEURAL
    test = data.split(ds, "test")
    idx = cfg["sample.trajectory"]
    if idx >= len(test):
        raise ConfigError("sample.trajectory", f"test split has only {len(test)} trajectories")
    traj = test[idx]
    persist_run(cfg, out, "sample", {"sample": cfg["run.seed"]})
    dist = models.predict(models.Predictor(kind, engine, model), traj.states[0], traj.actions, cfg["sample.n_samples"], cfg["run.seed"])
    finals = ev.final_positions(dist.samples)
    phys = ev.final_positions(engine.rollout(traj.states[0], traj.actions)[None])
    truth = ev.final_positions(traj.states[None])
    ev.write_points(out / f"{kind}_final.txt", finals)
    np.save(out / f"{kind}_samples.npy", dist.samples)
    if cfg.scenario == PUSH:
        ev.write_svg_scatter(out / f"{kind}_final.svg", {"Truth": truth, "Physics": phys, kind.capitalize(): finals}, title="final position")
    else:
        t = np.arange(dist.samples.shape[1])[None, :, None] * engine.dt
        curves = np.concatenate([np.broadcast_to(t, dist.samples[..., :1].shape), dist.samples[..., :1]], axis=-1)
        ev.write_svg_scatter(out / f"{kind}_height.svg", {kind.capitalize(): curves.reshape(-1, 2)}, title="height vs time")
    print(f"wrote {len(finals)} samples to {out}")


def cmd_gradcheck(trials: int, seed: int) -> bool:
    ok = True
    worst = diffengine.check_primitives(trials, seed)
    for kind, err in sorted(worst.items()):
        flag = "ok" if err < 1e-6 else "FAIL"
        ok &= err < 1e-6
        print(f"primitive {kind:14s} max rel err {err:.3e}  {flag}")
    for name, config in (("ball", dcvrnn.DCVRNNConfig.ball()), ("push", dcvrnn.DCVRNNConfig.push())):
        err = dcvrnn.elbo_grad_check(config, seed=seed)
        flag = "ok" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"elbo {name:19s} max rel err {err:.3e}  {flag}")
    return ok


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridsim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "sample"):
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="INI config file")
        for section, keys in SCHEMA.items():
            g = p.add_argument_group(section)
            for key, (_, default) in keys.items():
                shown = default if isinstance(default, str) else ", ".join(f"{k}: {v}" for k, v in default.items())
                g.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", metavar="V", help=f"default {shown}")
    g = sub.add_parser("gradcheck")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sample": cmd_sample}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        try:
            return EXIT_OK if cmd_gradcheck(args.trials, args.seed) else EXIT_RUNTIME
        except Exception as exc:  # noqa: BLE001
            print(f"error [diffengine]: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, Path(cfg["run.output_dir"]))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error [{_origin(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _origin(exc: BaseException) -> str:
    """Package module in which the exception was raised (deepest package frame)."""
    pkg = Path(__file__).resolve().parent
    name = "cli"
    tb = exc.__traceback__
    while tb is not None:
        f = Path(tb.tb_frame.f_code.co_filename).resolve()
        if pkg in f.parents:
            name = ".".join(f.relative_to(pkg).with_suffix("").parts)
        tb = tb.tb_next
    return name


if __name__ == "__main__":
    sys.exit(main())
