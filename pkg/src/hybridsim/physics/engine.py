"""Array-level front end to the two analytical engines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import BALL, PUSH, BallState, PushAction, PushState
from .ball import BallParams, ball_rollout
from .push import PushParams, push_rollout


@dataclass(frozen=True)
class Engine:
    """Open-loop rollout ``(s0, actions) -> states`` for one scenario."""

    scenario: str
    params: BallParams | PushParams

    def __post_init__(self):
        expected = BallParams if self.scenario == BALL else PushParams
        if self.scenario not in (BALL, PUSH) or not isinstance(self.params, expected):
            raise ValueError(f"engine params {type(self.params).__name__} do not match scenario {self.scenario!r}")

    @property
    def dt(self) -> float:
        return self.params.dt

    def rollout(self, s0, actions) -> np.ndarray:
        """States ``(T+1, state_dim)`` for ``T = len(actions)``."""
        actions = np.asarray(actions, dtype=float)
        if self.scenario == BALL:
            traj = ball_rollout(BallState.from_array(s0), self.params, len(actions))
        else:
            acts = [PushAction.from_array(a) for a in actions]
            traj = push_rollout(PushState.from_array(s0), acts, self.params)
        return np.array(traj.states)
