"""Synthetic scenes with exact ground truth for end-to-end verification.

The world is a smooth height field z = h(x, y) built from a handful of
random cosine waves, viewed by cameras that stay above it. Depth maps are
rendered by bisecting each pixel ray against the surface to near machine
precision, and the wave amplitudes are capped so every ray crosses the
surface exactly once; flow fields and tracks are then the exact
reprojection of that geometry, so any residual under the ground-truth
parameters is pure floating-point noise. Measurement noise, when
requested, is added after the exact generation step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from flowsfm import evalio, geometry
from flowsfm.correspondence import (FlowField, TrackSet, flow_to_field, read_flow,
                                    read_tracks, subsample_frames, tracks_to_set,
                                    write_flow, write_tracks, SubsampleResult)
from flowsfm.errors import DegenerateInputError
from flowsfm.geometry import Intrinsics, PoseSE3, Z_MIN, look_at

__all__ = ["NoiseSpec", "SceneSpec", "Scene", "HeightField", "make_scene",
           "render_depth", "write_scene", "read_scene", "subsample_scene",
           "SCENE_KINDS"]

SCENE_KINDS = ("orbit", "forward", "rotation_dominant")

# A transported point is occluded when it lies this far (relative) behind
# the rendered depth at its landing pixel.
OCCLUSION_REL_TOL = 0.01

# Ray-vs-surface slope margin: with the 55 degree viewing elevation the
# steepest ray still satisfies d_z > GRAD_LIMIT * |d_xy|, which makes the
# signed height gap monotone along every ray (single crossing, no
# self-occlusion).
GRAD_LIMIT = 0.35

_MARCH_STEPS = 64
_BISECT_ITERS = 60


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement corruption applied after exact generation (width units)."""

    flow_sigma: float = 0.0
    track_sigma: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.flow_sigma, self.track_sigma) < 0 or not 0 <= self.dropout < 1:
            raise ValueError(f"NoiseSpec: bad parameters {self}")

    def to_json(self) -> dict:
        return {"flow_sigma": self.flow_sigma, "track_sigma": self.track_sigma,
                "dropout": self.dropout}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "orbit"
    n_frames: int = 12
    width: int = 64
    height: int = 48
    focal: float = 1.2
    seed: int = 0
    amplitude: float = 0.25
    waves: int = 8
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    track_grid: int = 16
    track_reseed: int = 10
    # orbit only: scales the first frame step, < 1 makes the first pair
    # near-degenerate (tiny baseline) for schedule-robustness experiments
    first_step_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"SceneSpec: unknown kind {self.kind!r}")
        if self.n_frames < 2 or self.width < 4 or self.height < 4:
            raise ValueError("SceneSpec: need n_frames >= 2 and at least 4x4 images")
        if self.focal <= 0:
            raise ValueError("SceneSpec: focal must be positive")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("kind", "n_frames", "width", "height", "focal", "seed", "amplitude",
              "waves", "track_grid", "track_reseed", "first_step_scale")}
        d["noise"] = self.noise.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["noise"] = NoiseSpec.from_json(d.get("noise", {}))
        return cls(**d)


@dataclass(frozen=True)
class HeightField:
    """z = base + sum_m amps[m] * cos(2 pi freqs[m] . (x, y) + phases[m])."""

    amps: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    base: float = 0.0

    def h(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        args = 2 * np.pi * (np.multiply.outer(x, self.freqs[:, 0])
                            + np.multiply.outer(y, self.freqs[:, 1])) + self.phases
        return self.base + np.cos(args) @ self.amps

    def gradient_bound(self) -> float:
        """Upper bound on |grad h| anywhere."""
        return float(np.sum(self.amps * 2 * np.pi * np.linalg.norm(self.freqs, axis=-1)))


@dataclass
class Scene:
    spec: SceneSpec
    k: Intrinsics
    poses: list[PoseSE3]
    depths: np.ndarray                 # (F, H, W) exact
    flows: list[FlowField]             # F-1 adjacent pairs, noise applied
    tracks: TrackSet
    world: HeightField | None = None

    @property
    def n_frames(self) -> int:
        return len(self.poses)


def _make_world(rng: np.random.Generator, amplitude: float, waves: int) -> HeightField:
    freqs = rng.uniform(0.15, 0.85, (waves, 2)) * rng.choice([-1.0, 1.0], (waves, 2))
    phases = rng.uniform(0, 2 * np.pi, waves)
    amps = rng.uniform(0.5, 1.0, waves)
    amps *= amplitude / amps.sum()
    world = HeightField(amps, freqs, phases)
    bound = world.gradient_bound()
    if bound > GRAD_LIMIT:
        amps = amps * (GRAD_LIMIT / bound)
        world = HeightField(amps, freqs, phases)
    return world


def _scene_poses(spec: SceneSpec) -> list[PoseSE3]:
    n = spec.n_frames
    up = np.array([0.0, 0.0, -1.0])
    radius, elev = 1.5, np.deg2rad(55.0)
    height = -radius * np.tan(elev)
    if spec.kind == "orbit":
        thetas = np.arange(n) * 2 * np.pi / n
        if spec.first_step_scale != 1.0 and n > 1:
            thetas[1:] = np.concatenate(
                [[thetas[1] * spec.first_step_scale], thetas[2:]])
        eyes = [np.array([radius * np.cos(t), radius * np.sin(t), height])
                for t in thetas]
        return [look_at(e, np.zeros(3), up) for e in eyes]
    if spec.kind == "forward":
        eye0 = np.array([radius, 0.0, height])
        fwd = -eye0 / np.linalg.norm(eye0)
        step = 0.4 * np.linalg.norm(eye0) / max(n - 1, 1)
        return [look_at(eye0 + i * step * fwd, np.zeros(3), up) for i in range(n)]
    # rotation_dominant: fixed viewpoint, yaw sweep about the vertical axis
    # through the eye, with a vanishing translation along +y.
    eye0 = np.array([radius, 0.0, height])
    gaze0 = -eye0
    total_yaw = np.deg2rad(20.0)
    poses = []
    for i in range(n):
        a = total_yaw * (i / max(n - 1, 1) - 0.5)
        rz = np.array([[np.cos(a), -np.sin(a), 0.0],
                       [np.sin(a), np.cos(a), 0.0],
                       [0.0, 0.0, 1.0]])
        eye = eye0 + np.array([0.0, 5e-4 * i, 0.0])
        poses.append(look_at(eye, eye + rz @ gaze0, up))
    return poses


def render_depth(world: HeightField, pose: PoseSE3, k: Intrinsics,
                 width: int, height: int) -> np.ndarray:
    """Exact per-pixel depth by marching and bisecting each ray.

    Raises if the camera is not strictly above the surface or any ray
    crosses it more than once (the no-self-occlusion contract).
    """
    origin = -pose.r.T @ pose.t
    h_max = world.base + float(np.sum(world.amps))
    if origin[2] >= world.base - np.sum(world.amps) - 0.05:
        raise DegenerateInputError("render_depth: camera too close to the surface")

    uv = geometry.pixel_grid(width, height)
    dirs_cam = np.concatenate(
        [(uv - np.array([k.cx, k.cy])) / k.focal, np.ones((uv.shape[0], 1))], axis=-1)
    dirs = dirs_cam @ pose.r  # rows are R^T d
    if np.any(dirs[:, 2] <= 0):
        raise DegenerateInputError("render_depth: a pixel ray never descends to the surface")

    def gap(s):
        p = origin + s[..., None] * dirs
        return p[..., 2] - world.h(p[..., 0], p[..., 1])

    s_hi = 1.05 * (h_max - origin[2]) / dirs[:, 2]
    steps = np.linspace(0.0, 1.0, _MARCH_STEPS + 1)
    g = gap(np.multiply.outer(steps, s_hi))
    signs = g >= 0
    if signs[0].any():
        raise DegenerateInputError("render_depth: ray starts below the surface")
    crossings = (signs[1:] & ~signs[:-1]).sum(axis=0)
    if np.any(crossings != 1):
        raise DegenerateInputError("render_depth: surface self-occludes along a ray")
    first = signs[1:].argmax(axis=0)
    lo = steps[first] * s_hi
    hi = steps[first + 1] * s_hi
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        below = gap(mid) >= 0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return (0.5 * (lo + hi)).reshape(height, width)


def _transport(uv: np.ndarray, depth_i: np.ndarray, pose_i: PoseSE3, pose_j: PoseSE3,
               k: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact correspondence of frame-i pixels in frame j: (uv_j, z_j, world)."""
    x_i = geometry.unproject(uv, depth_i, k)
    x_w = pose_i.invert().apply(x_i)
    x_j = pose_j.apply(x_w)
    return geometry.project(x_j, k), x_j[:, 2], x_w


def _visibility(uv_j: np.ndarray, z_j: np.ndarray, depth_j: np.ndarray,
                k: Intrinsics, width: int, height: int) -> np.ndarray:
    """In-bounds, in-front, and not behind the frame-j z-buffer."""
    tx, ty = uv_j[:, 0] * width, uv_j[:, 1] * width
    ok = (z_j > Z_MIN) & (tx >= 0) & (tx <= width - 1) & (ty >= 0) & (ty <= height - 1)
    xi = np.clip(tx[ok], 0, width - 1 - 1e-9)
    yi = np.clip(ty[ok], 0, height - 1 - 1e-9)
    x0, y0 = xi.astype(int), yi.astype(int)
    x1, y1 = np.minimum(x0 + 1, width - 1), np.minimum(y0 + 1, height - 1)
    fx, fy = xi - x0, yi - y0
    zbuf = ((1 - fy) * ((1 - fx) * depth_j[y0, x0] + fx * depth_j[y0, x1])
            + fy * ((1 - fx) * depth_j[y1, x0] + fx * depth_j[y1, x1]))
    vis = ok.copy()
    vis[ok] = z_j[ok] <= zbuf * (1 + OCCLUSION_REL_TOL)
    return vis


def _exact_flows(poses: list[PoseSE3], depths: np.ndarray, k: Intrinsics,
                 width: int, height: int) -> list[FlowField]:
    uv = geometry.pixel_grid(width, height)
    flows = []
    for i in range(len(poses) - 1):
        uv_j, z_j, _ = _transport(uv, depths[i].ravel(), poses[i], poses[i + 1], k)
        mask = _visibility(uv_j, z_j, depths[i + 1], k, width, height)
        flows.append(FlowField((uv_j - uv).reshape(height, width, 2),
                               mask.reshape(height, width)))
    return flows


def _exact_tracks(spec: SceneSpec, poses: list[PoseSE3], depths: np.ndarray,
                  k: Intrinsics) -> TrackSet:
    w, h, n = spec.width, spec.height, len(poses)
    cols = np.round(np.linspace(0, w - 1, spec.track_grid)).astype(int)
    rows = np.round(np.linspace(0, h - 1, spec.track_grid)).astype(int)
    gc, gr = np.meshgrid(cols, rows)
    gc, gr = gc.ravel(), gr.ravel()
    uv_seed = np.stack([gc / w, gr / w], axis=-1)

    seeds = range(0, n, spec.track_reseed) if n > 1 else [0]
    pos_all, vis_all = [], []
    for q in seeds:
        _, _, x_w = _transport(uv_seed, depths[q, gr, gc], poses[q], poses[q], k)
        pos = np.zeros((uv_seed.shape[0], n, 2))
        vis = np.zeros((uv_seed.shape[0], n), dtype=bool)
        for j in range(n):
            x_j = poses[j].apply(x_w)
            uv_j = geometry.project(x_j, k)
            pos[:, j] = uv_j
            vis[:, j] = _visibility(uv_j, x_j[:, 2], depths[j], k, w, h)
        # the seed pixel must anchor the track; drop tracks occluded at birth
        keep = vis[:, q]
        vis[:, :q] = False  # a track exists only from its seed frame onward
        pos_all.append(pos[keep])
        vis_all.append(vis[keep])
    pos, vis = np.concatenate(pos_all), np.concatenate(vis_all)
    multi = vis.sum(axis=1) >= 2  # a single-frame track is not a correspondence
    return TrackSet(pos[multi], vis[multi])


def _apply_noise(flows: list[FlowField], tracks: TrackSet, noise: NoiseSpec,
                 rng: np.random.Generator) -> tuple[list[FlowField], TrackSet]:
    if noise.flow_sigma == 0 and noise.track_sigma == 0 and noise.dropout == 0:
        return flows, tracks
    out = []
    for fl in flows:
        f = fl.flow + rng.normal(0.0, noise.flow_sigma, fl.flow.shape) \
            if noise.flow_sigma else fl.flow.copy()
        m = fl.mask & (rng.random(fl.mask.shape) >= noise.dropout) \
            if noise.dropout else fl.mask.copy()
        out.append(FlowField(f, m))
    pos, vis = tracks.pos.copy(), tracks.visible.copy()
    queries = tracks.query_frames()
    t_idx = np.arange(tracks.n_tracks)
    if noise.track_sigma:
        jitter = rng.normal(0.0, noise.track_sigma, pos.shape)
        jitter[t_idx, queries] = 0.0  # the seed observation stays exact
        pos = pos + jitter
    if noise.dropout:
        drop = rng.random(vis.shape) < noise.dropout
        drop[t_idx, queries] = False
        vis &= ~drop
    keep = vis.sum(axis=1) >= 2  # dropout can strand single-frame tracks
    return out, TrackSet(pos[keep], vis[keep])


def make_scene(spec: SceneSpec) -> Scene:
    """Generate world, trajectory, exact depth/flow/tracks, then add noise."""
    rng = np.random.default_rng(spec.seed)
    world = _make_world(rng, spec.amplitude, spec.waves)
    poses = _scene_poses(spec)
    k = Intrinsics.centered(spec.focal, spec.width, spec.height)
    depths = np.stack([render_depth(world, p, k, spec.width, spec.height)
                       for p in poses])
    flows = _exact_flows(poses, depths, k, spec.width, spec.height)
    tracks = _exact_tracks(spec, poses, depths, k)
    flows, tracks = _apply_noise(flows, tracks, spec.noise, np.random.default_rng(spec.seed + 1))
    return Scene(spec, k, poses, depths, flows, tracks, world)


def subsample_scene(scene: Scene, target: int) -> tuple[Scene, SubsampleResult]:
    """Keep a motion-balanced subset of frames and rebuild pairwise data.

    Gap costs are the mean flow magnitudes of the original adjacent pairs;
    flows, tracks, and noise are regenerated for the selected subsequence.
    """
    gap = np.array([float(np.linalg.norm(f.flow, axis=-1)[f.mask].mean())
                    for f in scene.flows])
    sel = subsample_frames(gap, target)
    spec = replace(scene.spec, n_frames=len(sel.indices))
    poses = [scene.poses[i] for i in sel.indices]
    depths = scene.depths[sel.indices]
    flows = _exact_flows(poses, depths, scene.k, spec.width, spec.height)
    tracks = _exact_tracks(spec, poses, depths, scene.k)
    flows, tracks = _apply_noise(flows, tracks, spec.noise,
                                 np.random.default_rng(spec.seed + 1))
    return Scene(spec, scene.k, poses, depths, flows, tracks, scene.world), sel


# -- scene directories -------------------------------------------------------


def write_scene(scene: Scene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = scene.spec.to_json()
    meta["n_frames"] = scene.n_frames
    with open(out / "scene.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    geometry.save_trajectory(out / "gt_trajectory.txt",
                             [p.invert() for p in scene.poses])
    for i, d in enumerate(scene.depths):
        evalio.write_pfm(out / f"depth_{i:04d}.pfm", d)
    w = scene.spec.width
    for i, fl in enumerate(scene.flows):
        write_flow(out / f"flow_{i:04d}.flo", fl.flow * w, fl.mask)
    write_tracks(out / "tracks.csv", scene.tracks.pos * w, scene.tracks.visible)


def read_scene(in_dir) -> Scene:
    src = Path(in_dir)
    with open(src / "scene.json") as f:
        spec = SceneSpec.from_json(json.load(f))
    c2w = geometry.load_trajectory(src / "gt_trajectory.txt")
    poses = [p.invert() for p in c2w]
    depths = np.stack([evalio.read_pfm(src / f"depth_{i:04d}.pfm")
                       for i in range(spec.n_frames)])
    flows = [flow_to_field(*read_flow(src / f"flow_{i:04d}.flo"), spec.width)
             for i in range(spec.n_frames - 1)]
    tracks = tracks_to_set(*read_tracks(src / "tracks.csv"), spec.width)
    k = Intrinsics.centered(spec.focal, spec.width, spec.height)
    return Scene(spec, k, poses, depths, flows, tracks, None)
