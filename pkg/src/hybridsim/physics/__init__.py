from .engine import Engine
from .ball import BallParams, ball_energy, ball_rollout, ball_step
from .push import (
    FrictionField,
    GeometryError,
    PushParams,
    find_contact,
    push_motion_cone,
    push_rollout,
    push_step,
    sticking_twist,
    sticking_twist_isotropic,
    straight_push_actions,
)

__all__ = [
    "BallParams",
    "Engine",
    "FrictionField",
    "GeometryError",
    "PushParams",
    "ball_energy",
    "ball_rollout",
    "ball_step",
    "find_contact",
    "push_motion_cone",
    "push_rollout",
    "push_step",
    "sticking_twist",
    "sticking_twist_isotropic",
    "straight_push_actions",
]
