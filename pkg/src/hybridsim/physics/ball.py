"""Bouncing ball with exact impact times.

Flight between impacts is integrated in closed form, so the only modelling
choice is the restitution law at the ground (``v+ = -e * v-``). A rebound
slower than ``rest_speed`` ends the bounce sequence and the ball rests on
the ground.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import BALL, BallState, Trajectory


@dataclass(frozen=True)
class BallParams:
    radius: float = 0.5
    gravity: float = 9.81
    restitution: float = 0.65
    dt: float = 1.0 / 60.0
    rest_speed: float = 1e-3

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.restitution <= 1:
            raise ValueError("restitution must lie in (0, 1]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


def _time_to_ground(gap: float, v: float, g: float) -> float:
    """Smallest t >= 0 with gap + v t - g t^2 / 2 = 0 (gap >= 0)."""
    root = math.sqrt(v * v + 2.0 * g * gap)
    if v < 0:
        return 2.0 * gap / (root - v)
    return (v + root) / g


def ball_step(state: BallState, params: BallParams) -> BallState:
    r, g, e = params.radius, params.gravity, params.restitution
    h, v = state.height, state.velocity
    if h < r:
        raise ValueError(f"ball below ground: height {h} < radius {r}")
    remaining = params.dt
    while True:
        gap = h - r
        if gap == 0.0 and v == 0.0:
            return BallState(r, 0.0)
        t_hit = _time_to_ground(gap, v, g)
        if t_hit >= remaining:
            h = h + v * remaining - 0.5 * g * remaining * remaining
            v = v - g * remaining
            # rounding can leave the ball a hair under the surface at t_hit == remaining
            return BallState(max(h, r), v)
        # speed at impact from energy, exact up to rounding
        v_in = math.sqrt(v * v + 2.0 * g * gap)
        remaining -= t_hit
        h, v = r, e * v_in
        if v < params.rest_speed:
            return BallState(r, 0.0)


def ball_rollout(s0: BallState, params: BallParams, steps: int = 400) -> Trajectory:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    states = [s0]
    s = s0
    for _ in range(steps):
        s = ball_step(s, params)
        states.append(s)
    arr = np.array([[s.height, s.velocity] for s in states])
    return Trajectory(params.dt, arr, np.zeros((steps, 0)), {"scenario": BALL})


def ball_energy(state: BallState, params: BallParams) -> float:
    """Mechanical energy per unit mass, zero at rest on the ground."""
    return 0.5 * state.velocity**2 + params.gravity * (state.height - params.radius)
