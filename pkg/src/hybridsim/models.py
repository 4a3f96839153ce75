"""The four predictors compared in the experiments: Zero, Physics, Neural, Hybrid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dcvrnn
from .core import PUSH, Trajectory, TrajectoryDistribution, action_dim
from .physics import Engine

ZERO, PHYSICS, NEURAL, HYBRID = "zero", "physics", "neural", "hybrid"
KINDS = (ZERO, PHYSICS, NEURAL, HYBRID)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Predictor:
    """``kind`` plus the engine it rolls out with and, for the learned kinds, a trained DCVRNN.

    Neural and Hybrid share the architecture; Neural's conditions carry a
    zeroed physics slot.
    """

    kind: str
    engine: Engine
    model: dcvrnn.DCVRNN | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown predictor kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in (NEURAL, HYBRID):
            if self.model is None:
                raise ConfigurationError(f"{self.kind} predictor needs a trained model")
            if self.model.config.scenario != self.engine.scenario:
                raise ConfigurationError(
                    f"model scenario {self.model.config.scenario!r} != engine scenario {self.engine.scenario!r}"
                )
            if self.model.config.use_physics != (self.kind == HYBRID):
                want = "with" if self.kind == HYBRID else "without"
                raise ConfigurationError(f"{self.kind} predictor needs a model trained {want} the physics slot")

    @property
    def scenario(self) -> str:
        return self.engine.scenario

    @property
    def name(self) -> str:
        return self.kind.capitalize()


def predict(predictor: Predictor, s0, actions, n_samples: int = 10, seed: int = 0) -> TrajectoryDistribution:
    """Trajectory cloud of ``n_samples`` rollouts of ``len(actions)`` steps from ``s0``."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions.reshape(len(actions), -1) if actions.size else actions.reshape(0, 0)
    if len(actions) < 1:
        raise ValueError("predict needs at least one action")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s0 = np.asarray(s0, dtype=float)
    eng = predictor.engine
    if predictor.kind == ZERO:
        states = np.broadcast_to(s0, (len(actions) + 1, len(s0)))
    elif predictor.kind == PHYSICS:
        states = eng.rollout(s0, actions)
    else:
        return dcvrnn.sample(predictor.model, s0, actions, n_samples, seed, engine=eng)
    # deterministic kinds: every sample is the same trajectory
    return TrajectoryDistribution(eng.dt, np.broadcast_to(states, (n_samples,) + states.shape), eng.scenario)


def point_estimate(dist: TrajectoryDistribution, actions=None) -> Trajectory:
    """Per-step sample mean; push headings use the circular mean."""
    s = dist.samples
    if len(s) == 0:
        raise ValueError("empty distribution")
    if len(s) == 1:
        mean = np.array(s[0])
    else:
        mean = s.mean(axis=0)
        if dist.scenario == PUSH:
            th = s[..., 2]
            mean[:, 2] = np.arctan2(np.sin(th).mean(axis=0), np.cos(th).mean(axis=0))
            # atan2 gives [-pi, pi]; -pi is the same heading as pi
            mean[:, 2] = np.where(mean[:, 2] == -np.pi, np.pi, mean[:, 2])
    if actions is None:
        actions = np.zeros((len(mean) - 1, action_dim(dist.scenario)))
    dt = dist.dt if np.isfinite(dist.dt) and dist.dt > 0 else 1.0
    return Trajectory(dt, mean, actions)
