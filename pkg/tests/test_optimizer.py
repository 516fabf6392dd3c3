"""Adam updates, two-stage focal schedule, ablation wiring, determinism."""

from __future__ import annotations

import numpy as np
import pytest

from flowsfm import diffcore as dc
from flowsfm import intrinsicsolver, loss, posesolver
from flowsfm.errors import OptimizerDivergedError
from flowsfm.optimizer import ABLATIONS, Adam, SolveConfig, solve


def small_config(**overrides) -> SolveConfig:
    base = dict(stage1_steps=4, stage2_steps=4, lr=1e-2, lr_weights=1e-4,
                lr_focal=2e-3, depth_stride=4, seed=0)
    base.update(overrides)
    return SolveConfig(**base)


def run_solve(scene, cfg: SolveConfig, **kwargs):
    return solve(scene.flows, scene.tracks, scene.spec.width, scene.spec.height,
                 cfg, **kwargs)


# -- Adam ---------------------------------------------------------------------

def test_first_adam_step_is_a_signed_learning_rate():
    adam = Adam(0.9, 0.999, 1e-8)
    params = {"p": np.array([1.0, 1.0])}
    g = np.array([0.3, -0.002])
    adam.step(params, {"p": g}, {"p": 0.1})
    expected = 1.0 - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["p"], expected, rtol=1e-15)
    np.testing.assert_allclose(params["p"], 1.0 - 0.1 * np.sign(g), rtol=1e-6)


def test_adam_follows_the_textbook_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    adam = Adam(b1, b2, eps)
    params = {"p": np.array(2.0)}
    p_ref, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate([0.3, -0.2, 0.5, 0.1], start=1):
        adam.step(params, {"p": np.array(g)}, {"p": lr})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert params["p"] == pytest.approx(p_ref, rel=1e-14)


def test_zero_gradient_leaves_parameters_untouched():
    adam = Adam(0.9, 0.999, 1e-8)
    params = {"p": np.array([1.5, -2.0])}
    adam.step(params, {"p": np.zeros(2)}, {"p": 0.1})
    np.testing.assert_array_equal(params["p"], [1.5, -2.0])


def test_late_joining_parameter_gets_fresh_bias_correction():
    # Mirrors the stage-2 focal leaf appearing mid-run: its first update
    # must be a full signed step, not one damped by stale moments.
    adam = Adam(0.9, 0.999, 1e-8)
    params = {"a": np.array(0.0), "b": np.array(0.0)}
    for _ in range(5):
        adam.step(params, {"a": np.array(1.0)}, {"a": 0.1})
    adam.step(params, {"a": np.array(1.0), "b": np.array(1.0)}, {"a": 0.1, "b": 0.1})
    assert params["b"] == pytest.approx(-0.1, rel=1e-6)


# -- configuration ------------------------------------------------------------

def test_group_learning_rates_fall_back_to_the_base_rate():
    cfg = SolveConfig(lr=3e-5, lr_depth=1e-2)
    assert cfg.group_lr("depth") == 1e-2
    assert cfg.group_lr("weights") == 3e-5
    assert cfg.total_steps == 2000


def test_candidate_grid_comes_from_the_config():
    cands = SolveConfig(focal_lo=0.8, focal_hi=1.6, focal_count=5,
                        focal_temperature=7.0).candidates()
    np.testing.assert_allclose(cands.values, np.linspace(0.8, 1.6, 5))
    assert cands.temperature == 7.0


@pytest.mark.parametrize("bad", [
    dict(ablation="nope"),
    dict(stage1_steps=-1),
    dict(early_stop_window=-2),
    dict(beta1=1.0),
    dict(lr=0.0),
])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ValueError):
        SolveConfig(**bad)


def test_config_survives_a_save_load_round_trip(tmp_path):
    cfg = small_config(lr_depth=1e-3, max_flow_displacement=0.25,
                       ablation="no_tracks", early_stop_window=50)
    cfg.save(tmp_path / "config.json")
    assert SolveConfig.load(tmp_path / "config.json") == cfg


def test_ablation_names_are_stable():
    assert ABLATIONS == ("full", "explicit_depth", "explicit_pose", "explicit_focal",
                         "no_tracks", "no_weights", "single_stage")


# -- solve loop ---------------------------------------------------------------

def test_repeated_solves_are_bit_identical(tiny_scene):
    a = run_solve(tiny_scene, small_config())
    b = run_solve(tiny_scene, small_config())
    assert a.loss_rows == b.loss_rows
    np.testing.assert_array_equal(a.depths, b.depths)
    assert a.focal == b.focal
    for pa, pb in zip(a.poses, b.poses):
        np.testing.assert_array_equal(pa.r, pb.r)
        np.testing.assert_array_equal(pa.t, pb.t)


def test_ground_truth_logging_never_influences_the_solve(tiny_scene):
    plain = run_solve(tiny_scene, small_config())
    logged = run_solve(tiny_scene, small_config(), gt_poses=tiny_scene.poses)
    np.testing.assert_array_equal(plain.depths, logged.depths)
    assert plain.focal == logged.focal
    assert all(row[5] is None for row in plain.loss_rows)
    assert all(row[5] >= 0.0 for row in logged.loss_rows)


def test_stage_two_focal_starts_from_the_last_blend(tiny_scene):
    focals = []
    run_solve(tiny_scene, small_config(stage1_steps=3, stage2_steps=3),
              progress=lambda step, bd: focals.append(bd.focal))
    assert len(focals) == 6
    assert focals[3] == focals[2]          # frozen blend seeds the free scalar
    assert focals[4] != focals[3]          # and then it moves


def test_soft_selection_runs_exactly_through_stage_one(tiny_scene, monkeypatch):
    calls = {"n": 0}
    original = intrinsicsolver.soft_select_focal

    def counting(*args, **kwargs):
        calls["n"] += 1
        return original(*args, **kwargs)

    monkeypatch.setattr(intrinsicsolver, "soft_select_focal", counting)
    run_solve(tiny_scene, small_config(stage1_steps=3, stage2_steps=2))
    assert calls["n"] == 3

    calls["n"] = 0
    run_solve(tiny_scene, small_config(stage1_steps=3, stage2_steps=2,
                                       ablation="single_stage"))
    assert calls["n"] == 6                 # every step plus the final forward

    calls["n"] = 0
    run_solve(tiny_scene, small_config(stage1_steps=3, stage2_steps=2,
                                       ablation="explicit_focal"))
    assert calls["n"] == 0


def test_explicit_pose_mode_never_calls_the_procrustes_solve(tiny_scene, monkeypatch):
    def boom(*_a, **_k):
        raise AssertionError("Procrustes invoked")
    monkeypatch.setattr(posesolver, "solve_procrustes", boom)
    res = run_solve(tiny_scene, small_config(ablation="explicit_pose"))
    assert len(res.poses) == tiny_scene.n_frames
    np.testing.assert_allclose(res.poses[0].r, np.eye(3), atol=1e-15)


def test_early_stopping_cuts_the_run_short(tiny_scene):
    cfg = small_config(stage1_steps=50, stage2_steps=0, lr=1e-20, lr_weights=1e-20,
                       early_stop_window=5, early_stop_delta=1e-9)
    res = run_solve(tiny_scene, cfg)
    assert len(res.loss_rows) == 7         # steps 0..5 plus the final row
    assert res.loss_rows[-1][0] == 6       # labeled with the steps actually run


def test_disabled_early_stopping_runs_every_step(tiny_scene):
    res = run_solve(tiny_scene, small_config(stage1_steps=3, stage2_steps=2))
    assert [row[0] for row in res.loss_rows] == [0, 1, 2, 3, 4, 5]


def test_non_finite_loss_aborts_with_a_diagnostic(tiny_scene, monkeypatch):
    original = loss.forward
    state = {"calls": 0}

    def sabotaged(*args, **kwargs):
        out = original(*args, **kwargs)
        if state["calls"] >= 2:
            out.total = dc.constant(np.array(np.nan))
        state["calls"] += 1
        return out

    monkeypatch.setattr(loss, "forward", sabotaged)
    with pytest.raises(OptimizerDivergedError) as exc_info:
        run_solve(tiny_scene, small_config())
    assert exc_info.value.diagnostic["step"] == 2


def test_loss_descends_on_a_noiseless_scene(tiny_scene):
    res = run_solve(tiny_scene, small_config(stage1_steps=100, stage2_steps=100))
    totals = [row[1] for row in res.loss_rows]
    assert totals[-1] < 0.5 * totals[0]
    assert np.median(totals[-20:]) < np.median(totals[:20])
    assert all(np.isfinite(totals))


def test_solve_result_shapes_and_labels(tiny_scene):
    res = run_solve(tiny_scene, small_config(stage1_steps=2, stage2_steps=2))
    s = tiny_scene.spec
    assert res.depths.shape == (s.n_frames, s.height, s.width)
    assert np.all(res.depths > 0.0)
    assert len(res.poses) == s.n_frames
    assert res.loss_rows[-1][0] == 4 and len(res.loss_rows) == 5
    assert np.isfinite(res.epe_mean)
    assert res.config == small_config(stage1_steps=2, stage2_steps=2)
    assert res.camera_centers().shape == (s.n_frames, 3)
