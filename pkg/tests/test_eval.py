import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridsim import data, dcvrnn, models
from hybridsim import eval as ev
from hybridsim.core import BALL, PUSH, Trajectory
from hybridsim.physics import Engine

pts = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-10, 10))


def push_traj(states):
    s = np.asarray(states, dtype=float)
    return Trajectory(0.1, s, np.zeros((len(s) - 1, 4)))


def ball_traj(states):
    s = np.asarray(states, dtype=float)
    return Trajectory(0.1, s, np.zeros((len(s) - 1, 0)))


# -- trajectory metrics ----------------------------------------------------------


def _moving_push():
    t = np.linspace(0, 1, 11)
    return push_traj(np.column_stack([0.1 * t, 0.05 * t**2, 0.3 * t]))


def test_identical_prediction_scores_zero():
    t = _moving_push()
    assert ev.metrics(t, t, PUSH) == {"trans_pct": 0.0, "pos_err": 0.0, "rot_err_deg": 0.0}


def test_zero_prediction_scores_hundred():
    t = _moving_push()
    zero = push_traj(np.broadcast_to(t.states[0], t.states.shape))
    assert ev.trans_pct(zero, t) == pytest.approx(100.0, abs=1e-12)


def test_half_excursion_offset_scores_fifty():
    t = _moving_push()
    exc = t.states[:, :2] - t.states[0, :2]
    # a perpendicular offset of half the excursion at every step
    perp = 0.5 * np.column_stack([-exc[:, 1], exc[:, 0]])
    pred = push_traj(np.column_stack([t.states[:, :2] + perp, t.states[:, 2]]))
    assert ev.trans_pct(pred, t) == pytest.approx(50.0, abs=1e-12)


def test_static_truth_is_undefined():
    t = push_traj(np.zeros((5, 3)))
    with pytest.raises(ev.UndefinedMetric):
        ev.trans_pct(t, t)


def test_constant_two_mm_offset():
    t = _moving_push()
    pred = push_traj(t.states + [0.0012, 0.0016, 0.0])
    assert ev.pos_err(pred, t) == pytest.approx(0.002, abs=1e-15)


def test_rotation_error_wraps():
    a = push_traj([[0, 0, math.radians(179)]] * 4)
    b = push_traj([[0, 0, math.radians(-179)]] * 4)
    assert ev.rot_err_deg(a, b) == pytest.approx(2.0, abs=1e-9)


def test_ball_metrics_use_height_and_velocity():
    truth = ball_traj([[5.0, 0.0], [4.0, -1.0], [3.0, -2.0]])
    pred = ball_traj([[5.0, 0.0], [4.5, -1.5], [3.0, -2.0]])
    m = ev.metrics(pred, truth, BALL)
    assert m["trans_pct"] == pytest.approx(100 * 0.5 / 3.0)
    assert m["pos_err"] == pytest.approx(0.5 / 3)
    assert m["vel_err"] == pytest.approx(0.5 / 3)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ev.pos_err(_moving_push(), push_traj(np.zeros((3, 3))))


@settings(max_examples=50)
@given(
    arrays(np.float64, (6, 3), elements=st.floats(-1, 1)),
    arrays(np.float64, (6, 3), elements=st.floats(-1, 1)),
    st.floats(-100, 100),
    st.floats(-100, 100),
)
def test_metrics_invariant_under_translation(a, b, dx, dy):
    b[1:, 0] += 0.5  # make sure the truth moves
    shift = np.array([dx, dy, 0.0])
    m0 = ev.metrics(a, b, PUSH)
    m1 = ev.metrics(a + shift, b + shift, PUSH)
    for k in m0:
        assert m1[k] == pytest.approx(m0[k], rel=1e-6, abs=1e-9)


# -- chamfer ---------------------------------------------------------------------


def test_chamfer_examples():
    assert ev.chamfer([[0.0, 0.0]], [[3.0, 4.0]]) == 10.0
    p = np.array([[0.5, 1.5], [2.0, -1.0]])
    assert ev.chamfer(p, p) == 0.0


def test_chamfer_against_double_loop():
    rng = np.random.default_rng(0)
    S, T = rng.normal(size=(40, 2)), rng.normal(size=(25, 2))
    ref = sum(min(math.dist(p, q) for q in T) for p in S) / 40 + sum(min(math.dist(p, q) for p in S) for q in T) / 25
    assert ev.chamfer(S, T, chunk=7) == pytest.approx(ref, rel=1e-12)


@given(pts, pts)
def test_chamfer_symmetric(S, T):
    assert ev.chamfer(S, T) == pytest.approx(ev.chamfer(T, S), rel=1e-12, abs=1e-12)


@given(pts, pts)
def test_chamfer_zero_iff_same_point_set(S, T):
    same = {tuple(p) for p in S} == {tuple(p) for p in T}
    assert (ev.chamfer(S, T) == 0.0) == same


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        ev.chamfer(np.zeros((0, 2)), [[1.0, 2.0]])


# -- experiments and reports -----------------------------------------------------


@pytest.fixture(scope="module")
def ball_setup():
    cfg = data.BallGenConfig(n_train=4, n_test=4, steps=60)
    ds = data.gen_ball_dataset(cfg, seed=5)
    eng = Engine(BALL, cfg.engine_params())
    model = dcvrnn.DCVRNN.from_dataset(dcvrnn.DCVRNNConfig.ball(), data.split(ds, "train"), seed=0)
    preds = [
        models.Predictor(models.ZERO, eng),
        models.Predictor(models.PHYSICS, eng),
        models.Predictor(models.HYBRID, eng, model),
    ]
    return data.split(ds, "test"), preds


def test_run_experiment_rows(ball_setup):
    test, preds = ball_setup
    rep = ev.run_experiment(preds, list(test), n_samples=4, seed=1)
    assert set(rep.rows) == {"Zero", "Physics", "Hybrid"}
    assert rep.rows["Zero"]["trans_pct"] == pytest.approx(100.0, abs=1e-9)
    excursion = np.mean([np.abs(t.states[:, 0] - t.states[0, 0]).mean() for t in test])
    assert rep.rows["Zero"]["pos_err"] == pytest.approx(excursion, rel=1e-12)


def test_physics_row_zero_on_mismatch_free_data():
    cfg = data.BallGenConfig(n_train=0, n_test=3, perturb=False)
    ds = data.gen_ball_dataset(cfg, seed=0)
    rep = ev.run_experiment([models.Predictor(models.PHYSICS, Engine(BALL, cfg.engine_params()))], list(ds))
    assert all(v < 1e-9 for v in rep.rows["Physics"].values())


def test_report_reproducible_bitwise(ball_setup, tmp_path):
    test, preds = ball_setup
    a = ev.run_experiment(preds, list(test), n_samples=3, seed=2).to_json()
    b = ev.run_experiment(preds, list(test), n_samples=3, seed=2).to_json()
    assert a == b


def test_report_files(ball_setup, tmp_path):
    test, preds = ball_setup
    rep = ev.run_experiment(preds, list(test), n_samples=2, seed=0, horizon=30)
    rep.losses["Hybrid"] = 123.0
    table, summary = rep.save(tmp_path)
    text = table.read_text()
    assert "trans (%)" in text and "Physics" in text
    back = json.loads(summary.read_text())
    assert back["rows"]["Zero"]["trans_pct"] == pytest.approx(100.0)
    assert back["meta"]["horizon"] == 30


def test_report_rejects_negative_metrics():
    with pytest.raises(ValueError):
        ev.EvalReport(PUSH, "test", {"X": {"trans_pct": -1.0}})


def test_push_table_shows_millimetres():
    rep = ev.EvalReport(PUSH, "test", {"Physics": {"trans_pct": 10.0, "pos_err": 0.002, "rot_err_deg": 1.5}})
    assert "2.0000" in rep.to_table()


def test_distribution_study_and_artifacts(tmp_path):
    cfg = data.PushGenConfig(mode="repeated", n_train=30, n_test=0, duration=1.0, dt=0.05)
    ds = data.gen_push_dataset(cfg, seed=0)
    eng = Engine(PUSH, cfg.engine_params())
    model = dcvrnn.DCVRNN.from_dataset(dcvrnn.DCVRNNConfig.push(), ds, seed=0)
    preds = [models.Predictor(models.PHYSICS, eng), models.Predictor(models.HYBRID, eng, model)]
    truth = ev.final_positions(np.stack([t.states for t in ds]))
    dists, clouds = ev.distribution_study(preds, ds[0].states[0], ds[0].actions, truth, n_samples=50, seed=0)
    assert clouds["Physics"].shape == (1, 2) and clouds["Hybrid"].shape == (50, 2)
    assert dists["Physics"] == pytest.approx(ev.chamfer(clouds["Physics"], truth))
    ev.write_points(tmp_path / "p.txt", clouds["Hybrid"])
    np.testing.assert_allclose(np.loadtxt(tmp_path / "p.txt"), clouds["Hybrid"], rtol=1e-8)
    svg = ev.write_svg_scatter(tmp_path / "s.svg", clouds, title="final <position>").read_text()
    assert svg.startswith("<svg") and "&lt;position&gt;" in svg and svg.count("<circle") >= 81
