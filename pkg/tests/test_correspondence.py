"""Flow/track containers, bit-exact file formats, and frame subsampling."""

from __future__ import annotations

import numpy as np
import pytest

from flowsfm.correspondence import (
    FlowField,
    TrackSet,
    flow_to_field,
    lookup_flow,
    read_flow,
    read_tracks,
    subsample_frames,
    tracks_to_set,
    write_flow,
    write_tracks,
)


def grid_uv(w: int, h: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([jj.ravel() / w, ii.ravel() / w], axis=-1).astype(np.float64)


# -- lookup ----------------------------------------------------------------------

def test_lookup_zero_flow_returns_source():
    field = FlowField(np.zeros((6, 8, 2)), np.ones((6, 8), dtype=bool))
    uv = grid_uv(8, 6)
    v, ok = lookup_flow(field, uv)
    assert ok.all()
    np.testing.assert_array_equal(uv + v, uv)


def test_lookup_constant_flow_shifts_everything():
    delta = 0.03
    flow = np.zeros((5, 7, 2))
    flow[..., 0] = delta
    field = FlowField(flow, np.ones((5, 7), dtype=bool))
    rng = np.random.default_rng(0)
    uv = np.stack([rng.uniform(0, 6 / 7, 20), rng.uniform(0, 4 / 7, 20)], axis=-1)
    v, ok = lookup_flow(field, uv)
    assert ok.all()
    np.testing.assert_allclose(v, np.broadcast_to([delta, 0.0], (20, 2)), atol=1e-15)


def test_lookup_midpoint_averages_four_corners():
    flow = np.zeros((2, 2, 2))
    flow[0, 0] = (1.0, 0.0)
    flow[0, 1] = (2.0, 1.0)
    flow[1, 0] = (3.0, 2.0)
    flow[1, 1] = (4.0, 3.0)
    field = FlowField(flow, np.ones((2, 2), dtype=bool))
    v, ok = lookup_flow(field, np.array([[0.25, 0.25]]))  # pixel (0.5, 0.5) of a 2x2
    assert ok[0]
    np.testing.assert_allclose(v[0], [2.5, 1.5], atol=1e-15)


def test_lookup_exact_on_grid_points():
    rng = np.random.default_rng(1)
    flow = rng.normal(size=(4, 6, 2))
    field = FlowField(flow, np.ones((4, 6), dtype=bool))
    v, ok = lookup_flow(field, grid_uv(6, 4))
    assert ok.all()
    np.testing.assert_array_equal(v.reshape(4, 6, 2), flow)


def test_lookup_out_of_bounds_and_masked_are_invalid():
    mask = np.ones((4, 6), dtype=bool)
    mask[1, 2] = False
    field = FlowField(np.zeros((4, 6, 2)), mask)
    _, ok = lookup_flow(field, np.array([[1.5, 0.0], [-0.1, 0.1], [2 / 6, 1 / 6]]))
    assert not ok[0] and not ok[1]   # outside the image
    assert not ok[2]                 # supported by a masked corner


# -- container validation -----------------------------------------------------------

def test_flowfield_rejects_nonfinite_inside_mask():
    flow = np.zeros((2, 2, 2))
    flow[0, 0, 0] = np.nan
    mask = np.ones((2, 2), dtype=bool)
    with pytest.raises(ValueError, match="non-finite"):
        FlowField(flow, mask)
    mask[0, 0] = False
    FlowField(flow, mask)  # masked-out entries may be anything


def test_trackset_shape_and_query_frames():
    pos = np.zeros((3, 4, 2))
    vis = np.zeros((3, 4), dtype=bool)
    vis[0, 1:] = True
    vis[1, [0, 2]] = True
    ts = TrackSet(pos, vis)
    np.testing.assert_array_equal(ts.query_frames(), [1, 0, -1])
    with pytest.raises(ValueError, match="bad shapes"):
        TrackSet(pos, vis[:, :2])


# -- file round trips ----------------------------------------------------------------

def test_flow_file_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    flow_px = rng.normal(scale=3.0, size=(9, 13, 2)).astype(np.float32).astype(np.float64)
    mask = rng.random((9, 13)) > 0.3
    path = tmp_path / "f.flo"
    write_flow(path, flow_px, mask)
    back, back_mask = read_flow(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back.astype(np.float64), flow_px)
    np.testing.assert_array_equal(back_mask, mask)
    assert path.read_bytes()[:4] == b"FLO1"


def test_flow_file_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_flow(path)


def test_track_file_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    pos_px = rng.uniform(0, 64, size=(5, 6, 2))
    vis = rng.random((5, 6)) > 0.4
    path = tmp_path / "t.csv"
    write_tracks(path, pos_px, vis)
    back_pos, back_vis = read_tracks(path)
    np.testing.assert_array_equal(back_vis, vis)
    np.testing.assert_array_equal(back_pos[vis], pos_px[vis])
    header = path.read_text().splitlines()[0]
    assert header == "track_id,frame,px,py,visible"


def test_tracks_to_set_drops_single_frame_tracks():
    pos_px = np.zeros((3, 4, 2))
    vis = np.zeros((3, 4), dtype=bool)
    vis[0, :2] = True
    vis[1, 2] = True      # single observation: not a correspondence
    vis[2, 1:] = True
    with pytest.warns(UserWarning, match="dropped 1 tracks"):
        ts = tracks_to_set(pos_px, vis, 64)
    assert ts.n_tracks == 2


def test_flow_to_field_converts_units():
    flow_px = np.full((2, 3, 2), 4.0)
    field = flow_to_field(flow_px, np.ones((2, 3), dtype=bool), 8)
    np.testing.assert_array_equal(field.flow, np.full((2, 3, 2), 0.5))


# -- subsampling ----------------------------------------------------------------------

def test_subsample_uniform_ten_to_five():
    r = subsample_frames(np.ones(9), 5)
    assert r.indices.tolist() == [0, 2, 4, 7, 9]


def test_subsample_single_dominant_gap_keeps_both_sides():
    r = subsample_frames([0.0, 0.0, 1.0, 0.0, 0.0], 3)
    assert {2, 3} <= set(r.indices.tolist())
    assert r.indices[0] == 0 and r.indices[-1] == 5


def test_subsample_identity_when_target_covers_all():
    assert subsample_frames(np.ones(5), 6).indices.tolist() == [0, 1, 2, 3, 4, 5]
    assert subsample_frames(np.ones(5), 8).indices.tolist() == [0, 1, 2, 3, 4, 5]


def test_subsample_scale_invariant_and_ordered():
    rng = np.random.default_rng(4)
    mags = rng.uniform(0.1, 2.0, size=20)
    a = subsample_frames(mags, 7).indices
    b = subsample_frames(1000.0 * mags, 7).indices
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) > 0)


def test_subsample_ties_break_toward_earlier_frame():
    # level 1.0 sits exactly between cumulative 0.5 and 1.5
    r = subsample_frames([0.5, 1.0, 0.5], 3)
    assert r.indices.tolist() == [0, 1, 3]


def test_subsample_rejects_bad_inputs():
    with pytest.raises(ValueError, match="target_count"):
        subsample_frames(np.ones(5), 1)
    with pytest.raises(ValueError, match="finite"):
        subsample_frames(np.array([1.0, -2.0]), 2)
