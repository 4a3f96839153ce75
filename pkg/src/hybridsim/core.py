"""Domain types shared across the package.

States and actions are small immutable value objects. Trajectories store
them as float64 arrays (one row per time step) so the rest of the code can
work with numpy directly; ``Trajectory.states`` is ``(T+1, state_dim)`` and
``Trajectory.actions`` is ``(T, action_dim)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BALL = "ball"
PUSH = "push"
SCENARIOS = (BALL, PUSH)

# Column layout of the array representations.
BALL_STATE_DIM = 2  # (height, velocity)
BALL_ACTION_DIM = 0
PUSH_STATE_DIM = 3  # (x, y, theta)
PUSH_ACTION_DIM = 4  # (pusher_x, pusher_y, pusher_vx, pusher_vy)


class ShapeError(ValueError):
    """Raised when array shapes do not agree."""


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    arr = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"wrap_angle: non-finite input {theta!r}")
    out = np.mod(arr + math.pi, 2.0 * math.pi) - math.pi
    # np.mod maps +pi to -pi; the half-open interval keeps +pi instead.
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    if np.ndim(theta) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class BallState:
    height: float
    velocity: float

    def as_array(self) -> np.ndarray:
        return np.array([self.height, self.velocity], dtype=float)

    @classmethod
    def from_array(cls, a) -> "BallState":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class PushState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PushState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PushAction:
    pusher_pos: tuple[float, float]
    pusher_vel: tuple[float, float]

    def __post_init__(self):
        vals = (*self.pusher_pos, *self.pusher_vel)
        if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
            raise ValueError(f"PushAction needs finite 2-vectors, got {self!r}")
        object.__setattr__(self, "pusher_pos", tuple(float(v) for v in self.pusher_pos))
        object.__setattr__(self, "pusher_vel", tuple(float(v) for v in self.pusher_vel))

    def as_array(self) -> np.ndarray:
        return np.array([*self.pusher_pos, *self.pusher_vel], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PushAction":
        return cls((float(a[0]), float(a[1])), (float(a[2]), float(a[3])))


def state_dim(scenario: str) -> int:
    return {BALL: BALL_STATE_DIM, PUSH: PUSH_STATE_DIM}[scenario]


def action_dim(scenario: str) -> int:
    return {BALL: BALL_ACTION_DIM, PUSH: PUSH_ACTION_DIM}[scenario]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A fixed-step sequence of states and the actions between them."""

    dt: float
    states: np.ndarray
    actions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = _frozen(self.states)
        actions = np.asarray(self.actions, dtype=float)
        if states.ndim != 2:
            raise ShapeError(f"states must be 2-D, got shape {states.shape}")
        if actions.ndim == 1 and actions.size == 0:
            actions = np.zeros((len(states) - 1, 0))
        actions = _frozen(actions)
        if len(states) < 2:
            raise ValueError("a trajectory needs at least two states")
        if actions.ndim != 2 or len(actions) != len(states) - 1:
            raise ShapeError(
                f"expected {len(states) - 1} actions for {len(states)} states, got shape {actions.shape}"
            )
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def __len__(self) -> int:
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and self.meta == other.meta
        )

    def truncated(self, horizon: int) -> "Trajectory":
        return Trajectory(self.dt, self.states[: horizon + 1], self.actions[:horizon], dict(self.meta))


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std used to standardize network inputs and targets."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {self.mean.shape} vs std {self.std.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(self.std > 0)):
            raise ValueError("normalization stats must be finite with std > 0")

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def fit_stats(rows: np.ndarray) -> tuple[NormStats, list[int]]:
    """Population mean/std over rows; zero-variance columns get std 1.

    Returns the stats and the indices of the degenerate columns.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or len(rows) == 0:
        raise ValueError("fit_stats needs a nonempty 2-D array")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    flagged = [i for i, s in enumerate(std) if not s > 0]
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std), flagged


@dataclass(frozen=True, eq=False)
class Dataset:
    scenario: str
    trajectories: tuple
    state_stats: NormStats | None = None
    action_stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if trajs:
            dt = trajs[0].dt
            if any(t.dt != dt for t in trajs):
                raise ValueError("all trajectories in a dataset must share dt")
            sd, ad = state_dim(self.scenario), action_dim(self.scenario)
            for i, t in enumerate(trajs):
                if t.states.shape[1] != sd or t.actions.shape[1] != ad:
                    raise ShapeError(
                        f"trajectory {i}: states {t.states.shape} / actions {t.actions.shape} "
                        f"do not fit scenario {self.scenario!r}"
                    )

    @property
    def dt(self) -> float:
        return self.trajectories[0].dt

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.scenario == other.scenario
            and self.trajectories == other.trajectories
            and self.state_stats == other.state_stats
            and self.action_stats == other.action_stats
            and self.meta == other.meta
        )

    def with_trajectories(self, trajectories: Sequence[Trajectory]) -> "Dataset":
        return Dataset(self.scenario, tuple(trajectories), self.state_stats, self.action_stats, dict(self.meta))


def normalize(dataset: Dataset) -> Dataset:
    """Fit standardization stats on the dataset's states and actions.

    The trajectories themselves stay in physical units; the returned dataset
    carries the stats, and ``NormStats.apply`` / ``NormStats.invert`` do the
    transform. Zero-variance dimensions get std 1 with a warning.
    """
    if len(dataset) == 0:
        raise ValueError("cannot normalize an empty dataset")
    states = np.concatenate([t.states for t in dataset])
    state_stats, flagged = fit_stats(states)
    action_stats = None
    if action_dim(dataset.scenario) > 0:
        actions = np.concatenate([t.actions for t in dataset])
        action_stats, aflag = fit_stats(actions)
        flagged = flagged + [f"action[{i}]" for i in aflag]
    if flagged:
        warnings.warn(f"zero-variance dimensions {flagged}; std replaced by 1", RuntimeWarning, stacklevel=2)
    return Dataset(dataset.scenario, dataset.trajectories, state_stats, action_stats, dict(dataset.meta))


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.shape != self.std.shape:
            raise ShapeError(f"mean {self.mean.shape} vs std {self.std.shape}")
        if not np.all(self.std > 0):
            raise ValueError("DiagGaussian std must be positive")


@dataclass(frozen=True, eq=False)
class TrajectoryDistribution:
    """An empirical cloud of sampled trajectories sharing dt and length.

    ``samples`` has shape ``(n_samples, T+1, state_dim)`` in physical units.
    """

    dt: float
    samples: np.ndarray
    scenario: str

    def __post_init__(self):
        s = _frozen(self.samples)
        if s.ndim != 3 or len(s) == 0:
            raise ShapeError(f"samples must be (n, T+1, d) with n >= 1, got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def per_step_gaussian(self) -> list[DiagGaussian]:
        mean = self.samples.mean(axis=0)
        std = np.maximum(self.samples.std(axis=0), 1e-12)
        return [DiagGaussian(m, s) for m, s in zip(mean, std)]
