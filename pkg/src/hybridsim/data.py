"""Synthetic ground-truth datasets, the trajectory file format, and splits.

File format (one JSON object per line, UTF-8)::

    {"header": true, "scenario": "push", "meta": {...}, "state_stats": ..., "action_stats": ...}
    {"scenario": "push", "dt": 0.05, "states": [[x, y, theta], ...], "actions": [[px, py, vx, vy], ...], "meta": {...}}
    ...

The header line is optional. Every other line is one trajectory with
``len(actions) == len(states) - 1``. Ball states are ``[height, velocity]``
with empty action rows (``"actions": [[], [], ...]``). Floats are written
with ``repr`` precision, so a save/load cycle is exact and re-saving a
loaded file reproduces it byte for byte.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import BALL, PUSH, BallState, Dataset, NormStats, PushState, Trajectory, action_dim, state_dim
from .physics import BallParams, FrictionField, PushParams, ball_rollout, push_rollout
from .physics.push import straight_push_actions


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DatasetParseError(DatasetFormatError):
    pass


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class BallGenConfig:
    height_range: tuple[float, float] = (4.0, 5.0)
    restitution_mean: float = 0.5
    restitution_std: float = 0.1
    restitution_clip: tuple[float, float] = (0.05, 0.95)
    engine_restitution: float = 0.65
    perturb: bool = True
    radius: float = 0.5
    gravity: float = 9.81
    steps: int = 400
    dt: float = 1.0 / 60.0
    n_train: int = 800
    n_test: int = 100

    def engine_params(self) -> BallParams:
        return BallParams(self.radius, self.gravity, self.engine_restitution, self.dt)


@dataclass(frozen=True)
class PushGenConfig:
    # straight-line push geometry
    half_extents: tuple[float, float] = (0.045, 0.045)
    speed: float = 0.02
    duration: float = 7.5
    dt: float = 0.01
    # nominal engine
    c: float = 0.05
    mu_contact: float = 0.3
    # ground-truth perturbations
    perturb: bool = True
    c_bias: float = 1.0
    c_log_std: float = 0.1
    anisotropy_log_std: float = 0.05
    mu_contact_std: float = 0.0
    field_scale: float = 0.1
    field_amplitude: float = 0.1
    field_modes: int = 4
    # push sampling; "varied" randomizes pose/offset/heading, "repeated" is the fixed straight push
    mode: str = "varied"
    pose_range: float = 0.03
    offset_range: float = 0.03
    heading_range: float = 0.3
    repeated_offset: float = 0.0225
    n_train: int = 6500
    n_test: int = 628

    def engine_params(self) -> PushParams:
        return PushParams(c=self.c, mu_contact=self.mu_contact, half_extents=self.half_extents, dt=self.dt)


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _child_seeds(seed: int, n: int):
    return np.random.SeedSequence(seed).spawn(n)


def _split_tag(i: int, n_train: int) -> str:
    return "train" if i < n_train else "test"


def _map(fn, items, workers: int):
    """Ordered map, optionally over a process pool. Results do not depend on ``workers``."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _ball_one(job):
    config, i, seq = job
    rng = np.random.default_rng(seq)
    h0 = float(rng.uniform(*config.height_range))
    e = float(np.clip(rng.normal(config.restitution_mean, config.restitution_std), *config.restitution_clip))
    if not config.perturb:
        e = config.engine_restitution
    params = BallParams(config.radius, config.gravity, e, config.dt)
    tr = ball_rollout(BallState(h0, 0.0), params, config.steps)
    return Trajectory(tr.dt, tr.states, tr.actions, {"restitution": e, "split": _split_tag(i, config.n_train)})


def gen_ball_dataset(config: BallGenConfig = BallGenConfig(), seed: int = 0, workers: int = 1) -> Dataset:
    """Drops from random heights with per-trajectory restitution ~ N(mean, std).

    The first ``n_train`` trajectories are tagged ``train``, the rest
    ``test``. Heights are ball-centre heights.
    """
    n = config.n_train + config.n_test
    jobs = [(config, i, seq) for i, seq in enumerate(_child_seeds(seed, n))]
    trajs = _map(_ball_one, jobs, workers)
    meta = {"generator": "ball", "seed": seed, "config": _config_dict(config), "engine": _config_dict(config.engine_params())}
    return Dataset(BALL, tuple(trajs), meta=meta)


def sample_push_setup(config: PushGenConfig, rng: np.random.Generator):
    """Initial pose and pusher actions for one push."""
    if config.mode == "repeated":
        s0 = PushState(0.0, 0.0, 0.0)
        offset, heading = config.repeated_offset, 0.0
    elif config.mode == "varied":
        r = config.pose_range
        s0 = PushState(float(rng.uniform(-r, r)), float(rng.uniform(-r, r)), float(rng.uniform(-math.pi, math.pi)))
        offset = float(rng.uniform(-config.offset_range, config.offset_range))
        heading = float(rng.uniform(-config.heading_range, config.heading_range))
    else:
        raise ValueError(f"unknown push mode {config.mode!r}")
    actions = straight_push_actions(s0, offset, config.speed, config.duration, config.dt, config.half_extents, heading)
    return s0, actions


def ground_truth_push_params(config: PushGenConfig, rng: np.random.Generator, friction_field) -> PushParams:
    nominal = config.engine_params()
    if not config.perturb:
        return nominal
    c = config.c * config.c_bias * float(np.exp(rng.normal(0.0, config.c_log_std)))
    aniso = float(np.exp(rng.normal(0.0, config.anisotropy_log_std)))
    mu = max(0.0, config.mu_contact + config.mu_contact_std * float(rng.normal()))
    return PushParams(
        c=c,
        mu_contact=mu,
        half_extents=config.half_extents,
        dt=config.dt,
        anisotropy=aniso,
        friction_field=friction_field,
    )


def _push_one(job):
    config, i, seq, ffield = job
    rng = np.random.default_rng(seq)
    s0, actions = sample_push_setup(config, rng)
    gt = ground_truth_push_params(config, rng, ffield)
    tr = push_rollout(s0, actions, gt)
    meta = {"c": gt.c, "anisotropy": gt.anisotropy, "mu_contact": gt.mu_contact, "split": _split_tag(i, config.n_train)}
    return Trajectory(tr.dt, tr.states, tr.actions, meta)


def gen_push_dataset(config: PushGenConfig = PushGenConfig(), seed: int = 0, workers: int = 1) -> Dataset:
    """Pushes simulated with perturbed limit-surface parameters.

    The friction field is a property of the table: one field per dataset
    (drawn from ``seed``), shared by all trajectories. ``c``, the
    anisotropy and the contact friction are redrawn per trajectory.
    """
    n = config.n_train + config.n_test
    field_seq, *seqs = _child_seeds(seed, n + 1)
    ffield = None
    if config.perturb and config.field_amplitude > 0:
        ffield = FrictionField.random(np.random.default_rng(field_seq), config.field_scale, config.field_amplitude, config.field_modes)
    trajs = _map(_push_one, [(config, i, seq, ffield) for i, seq in enumerate(seqs)], workers)
    meta = {
        "generator": "push",
        "seed": seed,
        "config": _config_dict(config),
        "engine": {"c": config.c, "mu_contact": config.mu_contact, "half_extents": list(config.half_extents), "dt": config.dt},
        "friction_field": ffield.to_dict() if ffield is not None else None,
    }
    return Dataset(PUSH, tuple(trajs), meta=meta)


# ---------------------------------------------------------------------------
# splits


def split(dataset: Dataset, tag: str) -> Dataset:
    """Trajectories whose ``meta['split']`` equals ``tag``."""
    sel = [t for t in dataset if t.meta.get("split") == tag]
    if not sel:
        raise ValueError(f"no trajectories tagged {tag!r}")
    return dataset.with_trajectories(sel)


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded subset of ``round(fraction * n)`` trajectories, in original order.

    Subsets drawn with the same seed are nested: the 25% subset is contained
    in the 50% subset, and so on.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(dataset)
    k = int(round(fraction * n))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {n} trajectories leaves nothing")
    if k == n:
        return dataset
    order = np.random.default_rng(seed).permutation(n)
    keep = np.sort(order[:k])
    return dataset.with_trajectories([dataset[i] for i in keep])


# ---------------------------------------------------------------------------
# file format


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save(dataset: Dataset, path) -> None:
    header = {
        "header": True,
        "scenario": dataset.scenario,
        "meta": dataset.meta,
        "state_stats": dataset.state_stats.to_dict() if dataset.state_stats else None,
        "action_stats": dataset.action_stats.to_dict() if dataset.action_stats else None,
    }
    lines = [_dumps(header)]
    for t in dataset:
        lines.append(
            _dumps(
                {
                    "scenario": dataset.scenario,
                    "dt": t.dt,
                    "states": t.states.tolist(),
                    "actions": t.actions.tolist(),
                    "meta": t.meta,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _record_to_trajectory(rec, lineno, scenario):
    for key in ("scenario", "dt", "states", "actions"):
        if key not in rec:
            raise DatasetFormatError(f"record is missing field {key!r}", lineno)
    if rec["scenario"] != scenario:
        raise DatasetFormatError(f"scenario {rec['scenario']!r} differs from {scenario!r}", lineno)
    sd, ad = state_dim(scenario), action_dim(scenario)
    try:
        states = np.array(rec["states"], dtype=float)
        actions = np.array(rec["actions"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"ragged or non-numeric arrays ({exc})", lineno) from None
    if actions.size == 0:
        actions = actions.reshape(len(rec["actions"]), 0)
    if states.ndim != 2 or states.shape[1] != sd:
        raise DatasetFormatError(f"states must be rows of {sd} numbers, got shape {states.shape}", lineno)
    if actions.ndim != 2 or actions.shape[1] != ad:
        raise DatasetFormatError(f"actions must be rows of {ad} numbers, got shape {actions.shape}", lineno)
    if len(actions) != len(states) - 1:
        raise DatasetFormatError(f"{len(states)} states need {len(states) - 1} actions, found {len(actions)}", lineno)
    try:
        return Trajectory(float(rec["dt"]), states, actions, dict(rec.get("meta", {})))
    except ValueError as exc:
        raise DatasetFormatError(str(exc), lineno) from None


def load(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    header = None
    trajs = []
    scenario = None
    dt = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"malformed record ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetParseError("record is not a JSON object", lineno)
        if rec.get("header"):
            if header is not None or trajs:
                raise DatasetFormatError("header must be the first record", lineno)
            header = rec
            scenario = rec.get("scenario")
            continue
        if scenario is None:
            scenario = rec.get("scenario")
        if scenario not in (BALL, PUSH):
            raise DatasetFormatError(f"unknown scenario {scenario!r}", lineno)
        traj = _record_to_trajectory(rec, lineno, scenario)
        if dt is None:
            dt = traj.dt
        elif traj.dt != dt:
            raise DatasetFormatError(f"dt {traj.dt} differs from {dt} in earlier records", lineno)
        trajs.append(traj)
    if scenario is None:
        raise DatasetFormatError("file holds no records")
    stats = {}
    for key in ("state_stats", "action_stats"):
        d = header.get(key) if header else None
        stats[key] = NormStats.from_dict(d) if d else None
    return Dataset(scenario, tuple(trajs), stats["state_stats"], stats["action_stats"], dict(header["meta"]) if header else {})
