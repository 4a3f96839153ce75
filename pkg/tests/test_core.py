import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridsim.core import (
    BALL,
    PUSH,
    BallState,
    Dataset,
    DiagGaussian,
    NormStats,
    PushAction,
    PushState,
    ShapeError,
    Trajectory,
    TrajectoryDistribution,
    fit_stats,
    normalize,
    wrap_angle,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


# -- wrap_angle ---------------------------------------------------------------


def test_wrap_zero():
    assert wrap_angle(0.0) == 0.0


def test_wrap_three_pi_is_pi():
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi, abs=1e-12)


def test_wrap_negative_three_and_half_pi():
    # -3.5 pi + 4 pi = 0.5 pi
    assert wrap_angle(-3.5 * math.pi) == pytest.approx(0.5 * math.pi, abs=1e-12)


def test_wrap_minus_pi_maps_to_pi():
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_wrap_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        wrap_angle(bad)


def test_wrap_array():
    out = wrap_angle(np.array([0.0, 2 * math.pi + 0.1, -0.1]))
    np.testing.assert_allclose(out, [0.0, 0.1, -0.1], atol=1e-12)


@given(finite)
def test_wrap_range_and_congruence(x):
    y = wrap_angle(x)
    assert -math.pi < y <= math.pi
    k = (x - y) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-6


@given(finite)
def test_wrap_idempotent(x):
    y = wrap_angle(x)
    assert wrap_angle(y) == y


# -- states -------------------------------------------------------------------


def test_push_state_wraps_theta():
    s = PushState(0.0, 0.0, 3 * math.pi)
    assert s.theta == pytest.approx(math.pi)


def test_state_array_roundtrip():
    s = PushState(0.1, -0.2, 0.3)
    assert PushState.from_array(s.as_array()) == s
    b = BallState(4.5, -1.0)
    assert BallState.from_array(b.as_array()) == b


def test_push_action_rejects_non_finite():
    with pytest.raises(ValueError):
        PushAction((0.0, math.nan), (0.0, 0.0))


# -- Trajectory ---------------------------------------------------------------


def _traj(n=4, d=2):
    return Trajectory(0.1, np.arange(n * d, dtype=float).reshape(n, d), np.zeros((n - 1, 0)))


def test_trajectory_needs_two_states():
    with pytest.raises(ValueError):
        Trajectory(0.1, np.zeros((1, 2)), np.zeros((0, 0)))


def test_trajectory_action_count_checked():
    with pytest.raises(ShapeError):
        Trajectory(0.1, np.zeros((4, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("dt", [0.0, -1.0, math.nan])
def test_trajectory_rejects_bad_dt(dt):
    with pytest.raises(ValueError):
        Trajectory(dt, np.zeros((3, 2)), np.zeros((2, 0)))


def test_trajectory_rejects_non_finite():
    s = np.zeros((3, 2))
    s[1, 0] = math.inf
    with pytest.raises(ValueError):
        Trajectory(0.1, s, np.zeros((2, 0)))


def test_trajectory_is_read_only():
    t = _traj()
    with pytest.raises(ValueError):
        t.states[0, 0] = 1.0


def test_trajectory_truncated():
    t = _traj(5)
    u = t.truncated(2)
    assert u.horizon == 2 and len(u) == 3
    np.testing.assert_array_equal(u.states, t.states[:3])


# -- normalization ------------------------------------------------------------


def test_fit_stats_two_points():
    stats, flagged = fit_stats(np.array([[0.0], [2.0]]))
    np.testing.assert_array_equal(stats.apply(np.array([[0.0], [2.0]])), [[-1.0], [1.0]])
    assert flagged == []


def test_fit_stats_constant_column_flagged():
    rows = np.array([[5.0, 1.0], [5.0, 3.0], [5.0, 2.0]])
    stats, flagged = fit_stats(rows)
    assert flagged == [0]
    assert stats.std[0] == 1.0
    np.testing.assert_array_equal(stats.apply(rows)[:, 0], 0.0)


def test_fit_stats_standardized_input_unchanged():
    rows = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    stats, _ = fit_stats(rows)
    np.testing.assert_allclose(stats.apply(rows), rows, atol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_normalize_roundtrip(xs):
    rows = np.array(xs)[:, None]
    stats, _ = fit_stats(rows)
    back = stats.invert(stats.apply(rows))
    np.testing.assert_allclose(back, rows, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(rows).max()))


def test_norm_stats_dict_roundtrip():
    s = NormStats(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    t = NormStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(t.mean, s.mean)
    np.testing.assert_array_equal(t.std, s.std)


def test_normalize_dataset_warns_on_constant_dimension():
    trajs = [Trajectory(0.1, np.column_stack([np.full(3, 5.0), np.arange(3.0) + k]), np.zeros((2, 0))) for k in range(3)]
    ds = Dataset(BALL, tuple(trajs))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = normalize(ds)
    assert any("zero-variance" in str(x.message) for x in w)
    assert out.state_stats.std[0] == 1.0
    assert out.trajectories == ds.trajectories


def test_dataset_rejects_mixed_dt():
    a = Trajectory(0.1, np.zeros((3, 2)), np.zeros((2, 0)))
    b = Trajectory(0.2, np.zeros((3, 2)), np.zeros((2, 0)))
    with pytest.raises(ValueError):
        Dataset(BALL, (a, b))


# -- distributions ------------------------------------------------------------


def test_diag_gaussian_requires_positive_std():
    with pytest.raises(ValueError):
        DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ShapeError):
        DiagGaussian(np.zeros(2), np.ones(3))


def test_trajectory_distribution_per_step():
    samples = np.stack([np.zeros((3, 3)), np.ones((3, 3)) * 2])
    d = TrajectoryDistribution(0.1, samples, PUSH)
    g = d.per_step_gaussian()
    assert d.n_samples == 2 and len(g) == 3
    np.testing.assert_array_equal(g[0].mean, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(g[0].std, [1.0, 1.0, 1.0])
