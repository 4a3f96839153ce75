"""Trajectory metrics, Chamfer distance, and experiment reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import PUSH, Trajectory, wrap_angle
from .models import Predictor, point_estimate, predict


class UndefinedMetric(ValueError):
    """trans% of a ground truth that never leaves its start."""


def _states(x) -> np.ndarray:
    return np.asarray(x.states if isinstance(x, Trajectory) else x, dtype=float)


def _pair(pred, truth):
    p, q = _states(pred), _states(truth)
    if p.shape != q.shape:
        raise ValueError(f"prediction {p.shape} and truth {q.shape} differ in shape")
    return p, q


def positions(states) -> np.ndarray:
    """Height for ball states (h, v); planar position for push states (x, y, theta)."""
    s = _states(states)
    return s[..., :1] if s.shape[-1] == 2 else s[..., :2]


def trans_pct(pred, truth) -> float:
    """100 * sum_t |p_hat_t - p_t| / sum_t |p_0 - p_t|."""
    p, q = _pair(pred, truth)
    pp, qq = positions(p), positions(q)
    den = np.linalg.norm(qq - qq[0], axis=-1).sum()
    if den == 0:
        raise UndefinedMetric("trans% is undefined: ground truth never moves")
    return float(100.0 * np.linalg.norm(pp - qq, axis=-1).sum() / den)


def pos_err(pred, truth) -> float:
    """Mean Euclidean position error, in the state's length unit (meters)."""
    p, q = _pair(pred, truth)
    return float(np.linalg.norm(positions(p) - positions(q), axis=-1).mean())


def rot_err_deg(pred, truth) -> float:
    p, q = _pair(pred, truth)
    if p.shape[-1] != 3:
        raise ValueError("rotation error needs planar (x, y, theta) states")
    return float(np.degrees(np.abs(wrap_angle(p[:, 2] - q[:, 2]))).mean())


def vel_err(pred, truth) -> float:
    p, q = _pair(pred, truth)
    if p.shape[-1] != 2:
        raise ValueError("velocity error needs ball (height, velocity) states")
    return float(np.abs(p[:, 1] - q[:, 1]).mean())


def chamfer(S, T, chunk: int = 1024) -> float:
    """Mean nearest-neighbour distance from S to T plus from T to S (brute force)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if S.size == 0 or T.size == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    if S.shape[1] != T.shape[1]:
        raise ValueError(f"point dimensions differ: {S.shape[1]} vs {T.shape[1]}")
    best_t = np.full(len(T), np.inf)
    s_sum = 0.0
    for i in range(0, len(S), chunk):
        # hypot scales internally, so tiny separations do not square to zero
        d = np.hypot.reduce(np.abs(S[i : i + chunk, None, :] - T[None, :, :]), axis=-1)
        s_sum += d.min(axis=1).sum()
        best_t = np.minimum(best_t, d.min(axis=0))
    return float(s_sum / len(S) + best_t.sum() / len(T))


def metrics(pred, truth, scenario: str) -> dict:
    out = {"trans_pct": trans_pct(pred, truth), "pos_err": pos_err(pred, truth)}
    if scenario == PUSH:
        out["rot_err_deg"] = rot_err_deg(pred, truth)
    else:
        out["vel_err"] = vel_err(pred, truth)
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Per-model metrics (SI units) averaged over trajectories, plus optional Chamfer results."""

    scenario: str
    tag: str
    rows: dict = field(default_factory=dict)  # model name -> metric dict
    chamfer: dict = field(default_factory=dict)  # model name -> distance
    losses: dict = field(default_factory=dict)  # model name -> final training loss
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, row in self.rows.items():
            for k, v in row.items():
                if not (math.isfinite(v) and v >= 0):
                    raise ValueError(f"metric {k} of {name} is {v}")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "tag": self.tag,
            "rows": self.rows,
            "chamfer": self.chamfer,
            "losses": self.losses,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def to_table(self) -> str:
        if self.scenario == PUSH:
            cols = [("trans (%)", "trans_pct", 1.0), ("pos (mm)", "pos_err", 1e3), ("rot (deg)", "rot_err_deg", 1.0)]
        else:
            cols = [("trans (%)", "trans_pct", 1.0), ("pos (m)", "pos_err", 1.0), ("vel (m/s)", "vel_err", 1.0)]
        extra = bool(self.losses)
        head = ["model"] + (["loss"] if extra else []) + [c[0] for c in cols]
        lines = []
        for name, row in self.rows.items():
            cells = [name]
            if extra:
                loss = self.losses.get(name)
                cells.append("-" if loss is None else f"{loss:.4g}")
            cells += [f"{row[key] * scale:.4f}" for _, key, scale in cols]
            lines.append(cells)
        widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
        out = [f"# {self.scenario} / {self.tag}", fmt(head), fmt(["-" * w for w in widths])]
        out += [fmt(r) for r in lines]
        if self.chamfer:
            out.append("")
            out.append("chamfer distance to ground-truth cloud:")
            out += [f"  {k}: {v:.6g}" for k, v in self.chamfer.items()]
        return "\n".join(out) + "\n"

    def save(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        table, summary = d / "report.txt", d / "summary.json"
        table.write_text(self.to_table())
        summary.write_text(self.to_json() + "\n")
        return table, summary


def trajectory_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_experiment(
    predictors: Sequence[Predictor],
    trajectories: Sequence[Trajectory],
    n_samples: int = 10,
    seed: int = 0,
    tag: str = "test",
    horizon: int | None = None,
) -> EvalReport:
    """Metrics of each predictor's point estimate (mean of ``n_samples``), averaged over trajectories."""
    if not predictors:
        raise ValueError("no predictors to evaluate")
    if not trajectories:
        raise ValueError("no trajectories to evaluate on")
    scenario = predictors[0].scenario
    rows = {}
    for pr in predictors:
        if pr.scenario != scenario:
            raise ValueError("all predictors must share a scenario")
        acc: dict[str, list] = {}
        for i, traj in enumerate(trajectories):
            if horizon is not None:
                traj = traj.truncated(horizon)
            dist = predict(pr, traj.states[0], traj.actions, n_samples, trajectory_seed(seed, i))
            for k, v in metrics(point_estimate(dist), traj, scenario).items():
                acc.setdefault(k, []).append(v)
        rows[pr.name] = {k: float(np.mean(v)) for k, v in acc.items()}
    return EvalReport(scenario, tag, rows, meta={"n_samples": n_samples, "seed": seed, "n_trajectories": len(trajectories), "horizon": horizon})


def final_positions(samples) -> np.ndarray:
    """Final (x, y) of each sampled push trajectory, or final height for the ball."""
    s = np.asarray(samples, dtype=float)
    return positions(s[:, -1, :])


def distribution_study(
    predictors: Sequence[Predictor],
    s0,
    actions,
    truth_finals,
    n_samples: int = 2000,
    seed: int = 0,
) -> tuple[dict, dict]:
    """Chamfer distance between each predictor's final-position cloud and the ground-truth cloud.

    Returns (distances, clouds); deterministic predictors contribute a
    single point.
    """
    truth = np.asarray(truth_finals, dtype=float)
    dists, clouds = {}, {"Truth": truth}
    for pr in predictors:
        n = n_samples if pr.kind in ("neural", "hybrid") else 1
        cloud = final_positions(predict(pr, s0, actions, n, seed).samples)
        clouds[pr.name] = cloud
        dists[pr.name] = chamfer(cloud, truth)
    return dists, clouds


def write_points(path, points) -> Path:
    path = Path(path)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    np.savetxt(path, pts, fmt="%.9g", delimiter=" ", header=" ".join(f"c{i}" for i in range(pts.shape[1])))
    return path


_COLORS = ["#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]


def write_svg_scatter(path, clouds: Mapping[str, np.ndarray], size: int = 480, title: str = "") -> Path:
    """Static scatter of 2-D point clouds, one colour per cloud, with a legend."""
    path = Path(path)
    pts = {k: np.atleast_2d(np.asarray(v, dtype=float))[:, :2] for k, v in clouds.items()}
    allp = np.concatenate([p for p in pts.values() if p.size])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    pad = 40
    scale = (size - 2 * pad) / span

    def xy(p):
        return pad + (p[0] - lo[0]) * scale, size - pad - (p[1] - lo[1]) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{pad}" y="20" font-size="13" font-family="sans-serif">{escape(title)}</text>')
    for k, (name, p) in enumerate(pts.items()):
        color = _COLORS[k % len(_COLORS)]
        r = 1.5 if len(p) > 1 else 5
        for q in p:
            x, y = xy(q)
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}" fill-opacity="0.6"/>')
        parts.append(
            f'<text x="{pad + 110 * k}" y="{size - pad + 26}" font-size="12" font-family="sans-serif" fill="{color}">'
            f"{escape(name)} ({len(p)})</text>"
        )
    parts.append(
        f'<text x="{size - pad}" y="{size - 4}" font-size="10" text-anchor="end" font-family="sans-serif">'
        f"span {span:.4g}</text>"
    )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path

