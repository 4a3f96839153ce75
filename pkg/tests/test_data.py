import math

import numpy as np
import pytest

from hybridsim import data
from hybridsim.core import BALL, PUSH, normalize
from hybridsim.physics import Engine

SMALL_BALL = data.BallGenConfig(n_train=20, n_test=5, steps=120)
SMALL_PUSH = data.PushGenConfig(n_train=8, n_test=2, duration=1.0, dt=0.05)


@pytest.fixture(scope="module")
def ball():
    return data.gen_ball_dataset(SMALL_BALL, seed=3)


@pytest.fixture(scope="module")
def push():
    return data.gen_push_dataset(SMALL_PUSH, seed=3)


# -- ball generation -----------------------------------------------------------


def test_ball_generation_deterministic(ball):
    again = data.gen_ball_dataset(SMALL_BALL, seed=3)
    assert all(np.array_equal(a.states, b.states) for a, b in zip(ball, again))
    other = data.gen_ball_dataset(SMALL_BALL, seed=4)
    assert not np.array_equal(ball[0].states, other[0].states)


def test_ball_heights_in_range(ball):
    h0 = np.array([t.states[0, 0] for t in ball])
    assert np.all((h0 >= 4.0) & (h0 <= 5.0))
    assert np.all(np.array([t.states[0, 1] for t in ball]) == 0.0)


def test_ball_shapes_and_splits(ball):
    assert ball.scenario == BALL and len(ball) == 25
    assert all(t.states.shape == (121, 2) and t.actions.shape == (120, 0) for t in ball)
    assert len(data.split(ball, "train")) == 20 and len(data.split(ball, "test")) == 5


def test_restitution_law_mean():
    cfg = data.BallGenConfig(n_train=800, n_test=0, steps=1)
    ds = data.gen_ball_dataset(cfg, seed=0)
    e = np.array([t.meta["restitution"] for t in ds])
    assert abs(e.mean() - 0.5) < 0.02
    assert np.all((e >= 0.05) & (e <= 0.95))


def test_unperturbed_ball_makes_physics_exact():
    cfg = data.BallGenConfig(perturb=False, n_train=5, n_test=0, steps=400)
    ds = data.gen_ball_dataset(cfg, seed=1)
    eng = Engine(BALL, cfg.engine_params())
    for t in ds:
        pred = eng.rollout(t.states[0], t.actions)
        err = np.abs(pred[:, 0] - t.states[:, 0]).sum() / np.abs(t.states[0, 0] - t.states[:, 0]).sum()
        assert err < 1e-9


def test_perturbed_ball_differs_from_engine(ball):
    eng = Engine(BALL, SMALL_BALL.engine_params())
    t = ball[0]
    assert np.abs(eng.rollout(t.states[0], t.actions) - t.states).max() > 1e-3


# -- push generation -----------------------------------------------------------


def test_push_generation_deterministic(push):
    again = data.gen_push_dataset(SMALL_PUSH, seed=3)
    assert all(np.array_equal(a.states, b.states) for a, b in zip(push, again))
    assert push.meta["friction_field"] == again.meta["friction_field"]


def test_push_shapes(push):
    assert push.scenario == PUSH
    assert all(t.states.shape == (21, 3) and t.actions.shape == (20, 4) for t in push)
    assert all(t.meta["c"] > 0 for t in push)


def test_unperturbed_push_has_zero_residual():
    cfg = data.PushGenConfig(perturb=False, n_train=4, n_test=0, duration=1.0, dt=0.05)
    ds = data.gen_push_dataset(cfg, seed=2)
    eng = Engine(PUSH, cfg.engine_params())
    for t in ds:
        assert np.array_equal(eng.rollout(t.states[0], t.actions), t.states)


def test_perturbed_push_has_residual(push):
    eng = Engine(PUSH, SMALL_PUSH.engine_params())
    res = [np.abs(eng.rollout(t.states[0], t.actions) - t.states).max() for t in push]
    assert max(res) > 1e-4


def test_repeated_push_cloud_is_nondegenerate():
    cfg = data.PushGenConfig(mode="repeated", n_train=200, n_test=0, dt=0.05)
    ds = data.gen_push_dataset(cfg, seed=0)
    finals = np.array([t.states[-1] for t in ds])
    # identical setups, spread only from the parameter law
    assert all(np.array_equal(t.states[0], ds[0].states[0]) for t in ds)
    assert np.all(finals.std(axis=0) > 1e-4)
    # pusher travels 15 cm
    a = ds[0].actions
    assert np.linalg.norm(a[-1, :2] - a[0, :2]) + 0.02 * cfg.dt == pytest.approx(0.15, abs=1e-9)


def test_repeated_push_contact_half_way_to_edge():
    s0, acts = data.sample_push_setup(data.PushGenConfig(mode="repeated"), np.random.default_rng(0))
    assert acts[0].pusher_pos == pytest.approx((-0.045, 0.0225))
    assert acts[0].pusher_vel == pytest.approx((0.02, 0.0))


def test_unknown_push_mode():
    with pytest.raises(ValueError):
        data.sample_push_setup(data.PushGenConfig(mode="spiral"), np.random.default_rng(0))


# -- subsample -----------------------------------------------------------------


def test_subsample_full_is_identity(ball):
    assert data.subsample(ball, 1.0, 0) is ball


def test_subsample_deterministic_and_nested(ball):
    a, b = data.subsample(ball, 0.5, 7), data.subsample(ball, 0.5, 7)
    assert a.trajectories == b.trajectories
    ids = lambda ds: {id(t) for t in ds}  # noqa: E731
    sizes = []
    prev = set()
    for f in (0.25, 0.5, 0.75, 1.0):
        cur = ids(data.subsample(ball, f, 7))
        assert prev <= cur
        prev = cur
        sizes.append(len(cur))
    assert sizes == [round(f * 25) for f in (0.25, 0.5, 0.75, 1.0)]


@pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_fraction(ball, f):
    with pytest.raises(ValueError):
        data.subsample(ball, f, 0)


def test_subsample_empty_result_rejected(ball):
    with pytest.raises(ValueError):
        data.subsample(ball, 0.01, 0)


def test_split_unknown_tag(ball):
    with pytest.raises(ValueError):
        data.split(ball, "validation")


# -- file format ---------------------------------------------------------------


@pytest.mark.parametrize("which", ["ball", "push"])
def test_save_load_roundtrip_exact(request, tmp_path, which):
    ds = normalize(request.getfixturevalue(which))
    path = tmp_path / "d.jsonl"
    data.save(ds, path)
    back = data.load(path)
    assert back.scenario == ds.scenario and len(back) == len(ds)
    for a, b in zip(ds, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
        assert a.dt == b.dt and a.meta == b.meta
    np.testing.assert_array_equal(back.state_stats.mean, ds.state_stats.mean)
    data.save(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_truncated_file_names_the_record(push, tmp_path):
    path = tmp_path / "d.jsonl"
    data.save(push, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(data.DatasetParseError) as exc:
        data.load(path)
    assert exc.value.line is not None and exc.value.line > 1


def test_mismatched_counts_rejected(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"scenario": "ball", "dt": 0.1, "states": [[5, 0], [4.9, -1], [4.8, -2]], "actions": [[]]}\n')
    with pytest.raises(data.DatasetFormatError) as exc:
        data.load(path)
    assert exc.value.line == 1


def test_mixed_dt_rejected(tmp_path):
    rec = '{{"scenario": "ball", "dt": {dt}, "states": [[5, 0], [4.9, -1]], "actions": [[]]}}'
    path = tmp_path / "d.jsonl"
    path.write_text(rec.format(dt=0.1) + "\n" + rec.format(dt=0.2) + "\n")
    with pytest.raises(data.DatasetFormatError) as exc:
        data.load(path)
    assert exc.value.line == 2


def test_external_records_without_header_load(tmp_path):
    path = tmp_path / "ext.jsonl"
    path.write_text(
        '{"scenario": "push", "dt": 0.05, "states": [[0, 0, 0], [0.001, 0, 0]], '
        '"actions": [[-0.045, 0, 0.02, 0]]}\n'
    )
    ds = data.load(path)
    assert ds.scenario == PUSH and len(ds) == 1 and ds.state_stats is None


def test_non_finite_values_refused(tmp_path, ball):
    path = tmp_path / "d.jsonl"
    path.write_text('{"scenario": "ball", "dt": 0.1, "states": [[5, NaN], [4.9, -1]], "actions": [[]]}\n')
    with pytest.raises(data.DatasetFormatError):
        data.load(path)
    assert math.isfinite(ball[0].states.sum())


def test_parallel_generation_matches_serial():
    cfg = data.PushGenConfig(n_train=6, n_test=0, duration=0.5, dt=0.05)
    a = data.gen_push_dataset(cfg, seed=1)
    b = data.gen_push_dataset(cfg, seed=1, workers=2)
    assert all(np.array_equal(x.states, y.states) and x.meta == y.meta for x, y in zip(a, b))
