"""Quasi-static single-point pushing of a rectangle (ellipsoidal limit surface).

Twists are body-frame ``(vx, vy, omega)`` of the object origin. The limit
surface is the ellipsoid ``fx^2 + fy^2 / a + m^2 / (c^2) = const`` about the
centre of friction; its normal at a wrench ``w`` is ``H w`` with
``H = diag(1, a, 1/c^2)``. The nominal engine has ``a = 1`` and the centre
of friction at the geometric centre. The synthetic ground truth shifts the
centre of friction with a spatial friction field and perturbs ``a`` and
``c``; that is the only difference between the two.

Each step: find the contacted face and the pusher velocity in the body
frame, build the motion cone from the friction-cone edges, classify
sticking/sliding, compute the twist, integrate it exactly over ``dt`` and
snap the contacted face back onto the pusher.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..core import PUSH, PushAction, PushState, Trajectory, wrap_angle


class GeometryError(ValueError):
    """The contact geometry is degenerate (no well-defined face normal)."""


@dataclass(frozen=True)
class FrictionField:
    """Smooth multiplicative friction variation over the table.

    ``mu(p) = 1 + amplitude * sum_k w_k cos(k_k . p + phase_k)`` with
    ``sum |w_k| = 1`` and ``|k_k| = 2 pi / scale``.
    """

    wavevectors: np.ndarray  # (K, 2)
    phases: np.ndarray  # (K,)
    weights: np.ndarray  # (K,)
    amplitude: float

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 0.1, amplitude: float = 0.1, n_modes: int = 4):
        ang = rng.uniform(0, 2 * math.pi, n_modes)
        k = (2 * math.pi / scale) * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        w = rng.uniform(0.5, 1.0, n_modes)
        return cls(k, rng.uniform(0, 2 * math.pi, n_modes), w / w.sum(), float(amplitude))

    def grad_log(self, p) -> np.ndarray:
        arg = self.wavevectors @ np.asarray(p, dtype=float) + self.phases
        mu = 1.0 + self.amplitude * float(self.weights @ np.cos(arg))
        dmu = -self.amplitude * (self.weights * np.sin(arg)) @ self.wavevectors
        return dmu / mu

    def to_dict(self):
        return {
            "wavevectors": self.wavevectors.tolist(),
            "phases": self.phases.tolist(),
            "weights": self.weights.tolist(),
            "amplitude": self.amplitude,
        }


@dataclass(frozen=True)
class PushParams:
    c: float = 0.05
    mu_contact: float = 0.3
    half_extents: tuple[float, float] = (0.045, 0.045)
    dt: float = 0.01
    contact_point: tuple[float, float] | None = None
    anisotropy: float = 1.0
    cof_offset: tuple[float, float] = (0.0, 0.0)
    friction_field: FrictionField | None = field(default=None, compare=False)
    contact_tol: float = 1e-6

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.mu_contact < 0:
            raise ValueError("mu_contact must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.anisotropy > 0:
            raise ValueError("anisotropy must be positive")

    def cof_at(self, state: PushState) -> np.ndarray:
        """Centre of friction in the body frame at the given pose."""
        d = np.array(self.cof_offset, dtype=float)
        if self.friction_field is not None:
            hx, hy = self.half_extents
            # second moment of a uniform rectangle patch per unit area
            var = np.array([(2 * hx) ** 2, (2 * hy) ** 2]) / 12.0
            gw = self.friction_field.grad_log((state.x, state.y))
            c, s = math.cos(state.theta), math.sin(state.theta)
            gb = np.array([c * gw[0] + s * gw[1], -s * gw[0] + c * gw[1]])
            d = d + var * gb
        return d


@dataclass(frozen=True)
class Contact:
    point: np.ndarray  # body frame, on the face
    normal: np.ndarray  # inward unit normal, body frame
    tangent: np.ndarray  # normal rotated by +90 degrees
    gap: float  # signed distance of the pusher outside the face


def find_contact(pusher_body, half_extents) -> Contact:
    """Face of the rectangle closest to the pusher, with the pusher projected onto it."""
    p = np.asarray(pusher_body, dtype=float)
    hx, hy = half_extents
    if not np.all(np.isfinite(p)):
        raise GeometryError("pusher position is not finite")
    ox, oy = abs(p[0]) - hx, abs(p[1]) - hy
    if ox == oy and ox > 0:
        raise GeometryError(f"pusher at {p} faces a corner; contact normal undefined")
    if ox >= oy:
        sgn = 1.0 if p[0] > 0 else -1.0
        if p[0] == 0.0:
            raise GeometryError("pusher at the centre; contact normal undefined")
        normal = np.array([-sgn, 0.0])
        point = np.array([sgn * hx, p[1]])
        gap = ox
    else:
        sgn = 1.0 if p[1] > 0 else -1.0
        normal = np.array([0.0, -sgn])
        point = np.array([p[0], sgn * hy])
        gap = oy
    tangent = np.array([-normal[1], normal[0]])
    return Contact(point, normal, tangent, float(gap))


def _limit_surface_twist(force, point, cof, params: PushParams) -> np.ndarray:
    """Body-frame twist (about the origin) produced by a contact force."""
    r = np.asarray(point) - cof
    m = r[0] * force[1] - r[1] * force[0]
    vx, vy, w = force[0], params.anisotropy * force[1], m / params.c**2
    return np.array([vx + w * cof[1], vy - w * cof[0], w])


def contact_velocity(twist, point) -> np.ndarray:
    """Velocity of a body-frame point under a body-frame twist."""
    vx, vy, w = twist
    return np.array([vx - w * point[1], vy + w * point[0]])


def push_motion_cone(state: PushState, params: PushParams, contact: Contact | None = None):
    """Twists for the two friction-cone edge forces (left = normal + mu*tangent).

    Each twist is scaled so the contact point's normal velocity is 1.
    """
    if contact is None:
        if params.contact_point is None:
            raise GeometryError("no contact point given")
        contact = find_contact(params.contact_point, params.half_extents)
    cof = params.cof_at(state)
    n, t = contact.normal, contact.tangent
    edges = []
    for sgn in (1.0, -1.0):
        f = n + sgn * params.mu_contact * t
        tw = _limit_surface_twist(f, contact.point, cof, params)
        vn = float(n @ contact_velocity(tw, contact.point))
        if not vn > 0:
            raise GeometryError("edge force does not push the object along the normal")
        edges.append(tw / vn)
    return edges[0], edges[1]


def sticking_twist(u_body, point, cof, params: PushParams) -> np.ndarray:
    """Twist for which the contact point moves exactly with the pusher."""
    r = np.asarray(point) - cof
    k = 1.0 / params.c**2
    a = params.anisotropy
    m = np.array([[1.0 + k * r[1] ** 2, -k * r[0] * r[1]], [-k * r[0] * r[1], a + k * r[0] ** 2]])
    gx, gy = np.linalg.solve(m, np.asarray(u_body, dtype=float))
    w = k * (r[0] * gy - r[1] * gx)
    return np.array([gx + w * cof[1], a * gy - w * cof[0], w])


def sticking_twist_isotropic(u_body, point, c) -> np.ndarray:
    """Closed form for the nominal model (centre of friction at the origin, a = 1)."""
    x, y = point
    ux, uy = u_body
    den = c * c + x * x + y * y
    vx = ((c * c + x * x) * ux + x * y * uy) / den
    vy = (x * y * ux + (c * c + y * y) * uy) / den
    return np.array([vx, vy, (x * vy - y * vx) / (c * c)])


def classify(u_body, contact: Contact, edges) -> tuple[str, np.ndarray | None]:
    """'separating', 'sticking', or 'sliding' plus the violated edge twist."""
    n = contact.normal
    if not float(n @ u_body) > 0:
        return "separating", None
    vl = contact_velocity(edges[0], contact.point)
    vr = contact_velocity(edges[1], contact.point)
    det = vl[0] * vr[1] - vl[1] * vr[0]
    if abs(det) < 1e-12 * (np.linalg.norm(vl) * np.linalg.norm(vr)):
        # zero friction: the cone is a single ray
        return "sliding", edges[0]
    alpha = (u_body[0] * vr[1] - u_body[1] * vr[0]) / det
    beta = (vl[0] * u_body[1] - vl[1] * u_body[0]) / det
    if alpha >= 0 and beta >= 0:
        return "sticking", None
    return "sliding", (edges[1] if alpha < 0 else edges[0])


def integrate_twist(state: PushState, twist, dt: float) -> PushState:
    """Exact pose update for a body twist held constant over dt."""
    vx, vy, w = twist
    phi = w * dt
    if phi == 0.0:
        dx, dy = vx * dt, vy * dt
    elif abs(phi) < 1e-6:
        s_ = dt * (1.0 - phi * phi / 6.0)
        c_ = dt * (phi / 2.0 - phi**3 / 24.0)
        dx, dy = s_ * vx - c_ * vy, c_ * vx + s_ * vy
    else:
        s_ = math.sin(phi) / w
        c_ = (1.0 - math.cos(phi)) / w
        dx, dy = s_ * vx - c_ * vy, c_ * vx + s_ * vy
    c, s = math.cos(state.theta), math.sin(state.theta)
    theta = state.theta + phi
    if not -math.pi < theta <= math.pi:
        theta = wrap_angle(theta)
    return PushState(state.x + c * dx - s * dy, state.y + s * dx + c * dy, theta)


def to_body(state: PushState, p_world) -> np.ndarray:
    c, s = math.cos(state.theta), math.sin(state.theta)
    dx, dy = p_world[0] - state.x, p_world[1] - state.y
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def rotate_to_body(state: PushState, v_world) -> np.ndarray:
    c, s = math.cos(state.theta), math.sin(state.theta)
    return np.array([c * v_world[0] + s * v_world[1], -s * v_world[0] + c * v_world[1]])


def push_step(state: PushState, action: PushAction, params: PushParams, return_mode: bool = False):
    """Advance the object one step under a kinematically driven point pusher."""
    pusher = np.array(action.pusher_pos, dtype=float)
    p_body = to_body(state, pusher)
    contact = find_contact(p_body, params.half_extents)
    along = abs(float(contact.tangent @ contact.point))
    reach = params.half_extents[1] if contact.normal[0] != 0 else params.half_extents[0]
    u_body = rotate_to_body(state, action.pusher_vel)
    mode = "separating"
    new = state
    if contact.gap <= params.contact_tol and along <= reach:
        edges = push_motion_cone(state, params, contact)
        mode, edge = classify(u_body, contact, edges)
        if mode == "sticking":
            twist = sticking_twist(u_body, contact.point, params.cof_at(state), params)
        elif mode == "sliding":
            twist = edge * float(contact.normal @ u_body)
        if mode != "separating":
            new = integrate_twist(state, twist, params.dt)
            new = _snap_to_pusher(
                new, pusher + params.dt * np.asarray(action.pusher_vel), contact.normal, params.half_extents
            )
    return (new, mode) if return_mode else new


def _snap_to_pusher(state: PushState, pusher_world, face_normal, half_extents) -> PushState:
    """Translate the object along its face normal so the pusher sits on that face."""
    out = -np.asarray(face_normal, dtype=float)
    face = half_extents[0] if out[0] != 0 else half_extents[1]
    gap = float(out @ to_body(state, pusher_world)) - face
    if gap == 0.0:
        return state
    c, s = math.cos(state.theta), math.sin(state.theta)
    shift = gap * np.array([c * out[0] - s * out[1], s * out[0] + c * out[1]])
    return PushState(state.x + shift[0], state.y + shift[1], state.theta)


def push_rollout(s0: PushState, actions: Sequence[PushAction], params: PushParams) -> Trajectory:
    if len(actions) == 0:
        raise ValueError("push_rollout needs at least one action")
    states = [s0]
    s = s0
    for a in actions:
        s = push_step(s, a, params)
        states.append(s)
    return Trajectory(
        params.dt,
        np.array([x.as_array() for x in states]),
        np.array([a.as_array() for a in actions]),
        {"scenario": PUSH},
    )


def straight_push_actions(
    s0: PushState,
    contact_offset: float,
    speed: float,
    duration: float,
    dt: float,
    half_extents=(0.045, 0.045),
    direction: float = 0.0,
) -> list[PushAction]:
    """Pusher starting on the object's -x face at body-frame height ``contact_offset``.

    ``direction`` is the push heading relative to the inward face normal
    (radians, body frame at t = 0). The pusher moves at constant velocity.
    """
    n = int(round(duration / dt))
    c, s = math.cos(s0.theta), math.sin(s0.theta)
    start_b = np.array([-half_extents[0], contact_offset])
    start = np.array([s0.x + c * start_b[0] - s * start_b[1], s0.y + s * start_b[0] + c * start_b[1]])
    head = s0.theta + direction
    vel = speed * np.array([math.cos(head), math.sin(head)])
    return [PushAction(tuple(start + k * dt * vel), tuple(vel)) for k in range(n)]
