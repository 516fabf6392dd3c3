"""Synthetic ground truth: exact rendering, motion layouts, noise, IO."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from flowsfm import geometry
from flowsfm.errors import DegenerateInputError
from flowsfm.geometry import Intrinsics, PoseSE3, Z_MIN, rotation_angle
from flowsfm.loss import induced_correspondence
from flowsfm.synthworld import (HeightField, NoiseSpec, Scene, SceneSpec, make_scene,
                                read_scene, render_depth, subsample_scene, write_scene,
                                _exact_flows, _exact_tracks)


def flat_world(base: float = 0.0) -> HeightField:
    return HeightField(np.zeros(1), np.array([[0.3, 0.3]]), np.zeros(1), base)


def down_pose(center: np.ndarray) -> PoseSE3:
    """World-axis-aligned camera at ``center`` looking straight at +z."""
    return PoseSE3(np.eye(3), -np.asarray(center, dtype=np.float64))


def check_scene_consistency(scene: Scene, tol: float = 1e-10) -> None:
    """Noiseless flows must equal the depth/pose-induced correspondences."""
    s = scene.spec
    uv = geometry.pixel_grid(s.width, s.height)
    for i, fl in enumerate(scene.flows):
        rel = scene.poses[i].invert().compose(scene.poses[i + 1])
        out, valid = induced_correspondence(
            uv, scene.depths[i].reshape(-1), scene.k, rel)
        ok = fl.mask.reshape(-1)
        assert valid[ok].all()
        target = uv + fl.flow.reshape(-1, 2)
        assert np.max(np.abs(out[ok] - target[ok])) < tol


# -- rendering ----------------------------------------------------------------

def test_rendered_depth_puts_every_pixel_on_the_surface(tiny_scene):
    s = tiny_scene
    uv = geometry.pixel_grid(s.spec.width, s.spec.height)
    for pose, depth in zip(s.poses, s.depths):
        x_w = pose.invert().apply(geometry.unproject(uv, depth.reshape(-1), s.k))
        gap = x_w[:, 2] - s.world.h(x_w[:, 0], x_w[:, 1])
        assert np.max(np.abs(gap)) < 1e-10
        assert np.all(depth > 0.0)


def test_flat_world_renders_constant_depth():
    k = Intrinsics.centered(1.2, 16, 12)
    depth = render_depth(flat_world(), down_pose([0.0, 0.0, -2.0]), k, 16, 12)
    np.testing.assert_allclose(depth, 2.0, atol=1e-12)


def test_camera_too_close_to_the_surface_is_rejected():
    k = Intrinsics.centered(1.2, 16, 12)
    with pytest.raises(DegenerateInputError, match="too close"):
        render_depth(flat_world(), down_pose([0.0, 0.0, -0.01]), k, 16, 12)


def test_rays_that_never_descend_are_rejected():
    k = Intrinsics.centered(1.2, 16, 12)
    away = PoseSE3(np.diag([1.0, -1.0, -1.0]), np.zeros(3)).compose(
        down_pose([0.0, 0.0, -2.0]))
    flipped = PoseSE3(away.r, np.array([0.0, 0.0, -2.0]))
    with pytest.raises(DegenerateInputError, match="descends"):
        render_depth(flat_world(), flipped, k, 16, 12)


# -- exact correspondences ----------------------------------------------------

def test_masked_flow_targets_are_in_bounds_and_in_front(tiny_scene):
    s = tiny_scene
    w, h = s.spec.width, s.spec.height
    uv = geometry.pixel_grid(w, h)
    for i, fl in enumerate(s.flows):
        rel = s.poses[i].invert().compose(s.poses[i + 1])
        pts = rel.apply(geometry.unproject(uv, s.depths[i].reshape(-1), s.k))
        target = (uv + fl.flow.reshape(-1, 2)) * w
        ok = fl.mask.reshape(-1)
        assert np.all(pts[ok, 2] > Z_MIN)
        assert np.all((target[ok, 0] >= 0) & (target[ok, 0] <= w - 1))
        assert np.all((target[ok, 1] >= 0) & (target[ok, 1] <= h - 1))


def test_static_camera_has_zero_flow_and_frozen_tracks():
    k = Intrinsics.centered(1.2, 16, 12)
    spec = SceneSpec(n_frames=3, width=16, height=12, seed=4)
    world = flat_world()
    pose = down_pose([0.1, -0.2, -2.0])
    depth = render_depth(world, pose, k, 16, 12)
    depths = np.stack([depth, depth, depth])
    flows = _exact_flows([pose] * 3, depths, k, 16, 12)
    for fl in flows:
        assert np.max(np.abs(fl.flow)) < 1e-12
        assert fl.mask.all()
    tracks = _exact_tracks(spec, [pose] * 3, depths, k)
    assert tracks.n_tracks > 0
    spread = tracks.pos.max(axis=1) - tracks.pos.min(axis=1)
    assert np.max(spread[tracks.visible.all(axis=1)]) < 1e-12


def test_sideways_shift_over_a_plane_gives_the_textbook_parallax():
    w, h, f, z, delta = 16, 12, 1.2, 2.0, 0.1
    k = Intrinsics.centered(f, w, h)
    p0 = down_pose([0.0, 0.0, -z])
    p1 = down_pose([delta, 0.0, -z])
    depths = np.stack([render_depth(flat_world(), p, k, w, h) for p in (p0, p1)])
    fl = _exact_flows([p0, p1], depths, k, w, h)[0]
    assert np.max(np.abs(fl.flow[..., 0] - (-f * delta / z))) < 1e-14
    assert np.max(np.abs(fl.flow[..., 1])) < 1e-14
    shifted_out = geometry.pixel_grid(w, h)[:, 0] * w - f * delta / z * w < 0
    np.testing.assert_array_equal(fl.mask.reshape(-1), ~shifted_out)


def test_track_queries_anchor_on_their_seed_pixels(tiny_scene):
    t = tiny_scene.tracks
    q = t.query_frames()
    assert np.all(q >= 0)
    assert np.all(t.visible[np.arange(t.n_tracks), q])
    assert np.all(t.visible.sum(axis=1) >= 2)
    seed_px = t.pos[np.arange(t.n_tracks), q] * tiny_scene.spec.width
    np.testing.assert_allclose(seed_px, np.round(seed_px), atol=1e-12)


# -- trajectories -------------------------------------------------------------

def test_orbit_sweeps_a_full_circle():
    scene = make_scene(SceneSpec(kind="orbit", n_frames=90, width=16, height=12))
    centers = np.stack([-p.r.T @ p.t for p in scene.poses])
    np.testing.assert_allclose(np.linalg.norm(centers[:, :2], axis=1), 1.5, atol=1e-12)
    np.testing.assert_allclose(centers[:, 2], centers[0, 2], atol=1e-12)
    theta = np.unwrap(np.arctan2(centers[:, 1], centers[:, 0]))
    np.testing.assert_allclose(theta - theta[0], np.arange(90) * 2 * np.pi / 90,
                               atol=1e-12)


def test_forward_motion_advances_along_a_fixed_line():
    scene = make_scene(SceneSpec(kind="forward", n_frames=5, width=16, height=12))
    centers = np.stack([-p.r.T @ p.t for p in scene.poses])
    steps = np.diff(centers, axis=0)
    np.testing.assert_allclose(steps - steps[0], 0.0, atol=1e-12)
    assert rotation_angle(scene.poses[0].r, scene.poses[-1].r) < 1e-12
    total = np.linalg.norm(centers[-1] - centers[0])
    assert total == pytest.approx(0.4 * np.linalg.norm(centers[0]), rel=1e-10)


def test_rotation_dominant_motion_barely_translates():
    scene = make_scene(SceneSpec(kind="rotation_dominant", n_frames=6,
                                 width=16, height=12))
    centers = np.stack([-p.r.T @ p.t for p in scene.poses])
    step_sizes = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    np.testing.assert_allclose(step_sizes, 5e-4, atol=1e-12)
    assert rotation_angle(scene.poses[0].r, scene.poses[-1].r) == pytest.approx(
        np.deg2rad(20.0), abs=1e-9)


def test_first_step_scale_shrinks_only_the_opening_baseline():
    base = make_scene(SceneSpec(kind="orbit", n_frames=6, width=16, height=12))
    tight = make_scene(SceneSpec(kind="orbit", n_frames=6, width=16, height=12,
                                 first_step_scale=0.1))
    angle = lambda p: np.arctan2(*(-p.r.T @ p.t)[[1, 0]])
    assert angle(tight.poses[1]) == pytest.approx(0.1 * angle(base.poses[1]), rel=1e-10)
    for i in (0, 2, 3, 4, 5):
        assert angle(tight.poses[i]) == pytest.approx(angle(base.poses[i]), abs=1e-12)


# -- determinism and noise ----------------------------------------------------

def test_identical_specs_generate_identical_scenes():
    spec = SceneSpec(n_frames=3, width=16, height=12, seed=9,
                     noise=NoiseSpec(flow_sigma=0.002, dropout=0.1))
    a, b = make_scene(spec), make_scene(spec)
    np.testing.assert_array_equal(a.depths, b.depths)
    for fa, fb in zip(a.flows, b.flows):
        np.testing.assert_array_equal(fa.flow, fb.flow)
        np.testing.assert_array_equal(fa.mask, fb.mask)
    np.testing.assert_array_equal(a.tracks.pos, b.tracks.pos)
    for pa, pb in zip(a.poses, b.poses):
        np.testing.assert_array_equal(pa.r, pb.r)


def test_flow_noise_has_the_requested_scale():
    sigma = 0.01
    clean_spec = SceneSpec(n_frames=6, width=32, height=24, seed=3)
    noisy_spec = dataclasses.replace(clean_spec, noise=NoiseSpec(flow_sigma=sigma))
    clean, noisy = make_scene(clean_spec), make_scene(noisy_spec)
    diff = np.concatenate([(n.flow - c.flow).ravel()
                           for n, c in zip(noisy.flows, clean.flows)])
    assert diff.size > 5000
    assert abs(diff.std() - sigma) < 0.05 * sigma
    assert abs(diff.mean()) < 5 * sigma / np.sqrt(diff.size)
    for n, c in zip(noisy.flows, clean.flows):
        np.testing.assert_array_equal(n.mask, c.mask)


def test_dropout_removes_the_requested_fraction():
    clean_spec = SceneSpec(n_frames=6, width=32, height=24, seed=3)
    noisy_spec = dataclasses.replace(clean_spec, noise=NoiseSpec(dropout=0.3))
    clean, noisy = make_scene(clean_spec), make_scene(noisy_spec)
    total = sum(c.mask.sum() for c in clean.flows)
    kept = sum(n.mask.sum() for n in noisy.flows)
    assert not any(np.any(n.mask & ~c.mask) for n, c in zip(noisy.flows, clean.flows))
    assert abs(kept / total - 0.7) < 0.03
    assert np.all(noisy.tracks.visible.sum(axis=1) >= 2)


def test_track_noise_spares_the_query_observations():
    spec = SceneSpec(n_frames=6, width=32, height=24, seed=3,
                     noise=NoiseSpec(track_sigma=0.005, dropout=0.2))
    scene = make_scene(spec)
    t = scene.tracks
    q = t.query_frames()
    rows = np.arange(t.n_tracks)
    seed_px = t.pos[rows, q] * spec.width
    np.testing.assert_allclose(seed_px, np.round(seed_px), atol=1e-12)
    assert np.all(t.visible[rows, q])
    jittered = t.pos * spec.width
    off_grid = np.abs(jittered - np.round(jittered)).max(axis=-1) > 1e-6
    non_query = t.visible.copy()
    non_query[rows, q] = False
    assert off_grid[non_query].mean() > 0.9


# -- selection and IO ---------------------------------------------------------

def test_subsample_keeps_endpoints_and_stays_consistent():
    scene = make_scene(SceneSpec(n_frames=9, width=16, height=12, seed=2))
    sub, sel = subsample_scene(scene, 5)
    assert sel.indices[0] == 0 and sel.indices[-1] == 8
    assert np.all(np.diff(sel.indices) > 0)
    assert sub.n_frames == len(sel.indices) == sub.spec.n_frames
    np.testing.assert_array_equal(sub.depths, scene.depths[sel.indices])
    for j, i in enumerate(sel.indices):
        np.testing.assert_array_equal(sub.poses[j].r, scene.poses[i].r)
    check_scene_consistency(sub)


def test_scene_round_trips_through_a_directory(tmp_path, noisy_scene):
    write_scene(noisy_scene, tmp_path)
    back = read_scene(tmp_path)
    assert back.spec == noisy_scene.spec
    assert back.n_frames == noisy_scene.n_frames
    for pa, pb in zip(back.poses, noisy_scene.poses):
        np.testing.assert_allclose(pa.r, pb.r, atol=1e-12)
        np.testing.assert_allclose(pa.t, pb.t, atol=1e-12)
    np.testing.assert_allclose(back.depths, noisy_scene.depths, rtol=1e-6)
    for fa, fb in zip(back.flows, noisy_scene.flows):
        np.testing.assert_allclose(fa.flow, fb.flow, atol=1e-7)
        np.testing.assert_array_equal(fa.mask, fb.mask)
    np.testing.assert_array_equal(back.tracks.visible, noisy_scene.tracks.visible)
    vis = back.tracks.visible
    np.testing.assert_allclose(back.tracks.pos[vis], noisy_scene.tracks.pos[vis],
                               atol=1e-12)


def test_spec_round_trips_through_json():
    spec = SceneSpec(kind="forward", n_frames=7, width=20, height=16, focal=0.9,
                     seed=5, noise=NoiseSpec(flow_sigma=0.01, dropout=0.05),
                     first_step_scale=0.5)
    assert SceneSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("bad", [
    dict(kind="spiral"),
    dict(n_frames=1),
    dict(width=2),
    dict(focal=0.0),
])
def test_invalid_scene_specs_are_rejected(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


@pytest.mark.parametrize("bad", [
    dict(flow_sigma=-0.1),
    dict(dropout=1.0),
    dict(dropout=-0.2),
])
def test_invalid_noise_specs_are_rejected(bad):
    with pytest.raises(ValueError):
        NoiseSpec(**bad)


def test_every_motion_layout_is_self_consistent():
    for kind in ("orbit", "forward", "rotation_dominant"):
        check_scene_consistency(
            make_scene(SceneSpec(kind=kind, n_frames=4, width=16, height=12, seed=6)))
