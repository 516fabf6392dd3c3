"""First-order solver: Adam over depth, confidence, focal, and pose variables.

One optimization step rebuilds the tape from the current parameter values,
evaluates the camera-induced loss, and applies a textbook Adam update with
per-group learning rates. The focal length follows a two-stage schedule:
a softmin blend over the candidate sweep while depth settles, then a free
scalar seeded from the last blended value. Ablations swap individual
components for explicit variables or drop terms so their contribution can
be measured in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from flowsfm import diffcore as dc
from flowsfm import evalio, geometry, loss
from flowsfm.correspondence import FlowField, TrackSet
from flowsfm.depthparam import FreeDepth, GridDepth, WeightHead
from flowsfm.errors import DegenerateInputError, OptimizerDivergedError
from flowsfm.geometry import PoseSE3
from flowsfm.intrinsicsolver import FocalCandidates

__all__ = ["SolveConfig", "SolveResult", "Adam", "solve", "ABLATIONS"]

ABLATIONS = ("full", "explicit_depth", "explicit_pose", "explicit_focal",
             "no_tracks", "no_weights", "single_stage")


@dataclass(frozen=True)
class SolveConfig:
    stage1_steps: int = 1000
    stage2_steps: int = 1000
    lr: float = 3e-5
    lr_depth: float | None = None
    lr_weights: float | None = None
    lr_pose: float | None = None
    lr_focal: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ablation: str = "full"
    depth_stride: int = 8
    weight_stride: int = 8
    lattice_nodes: int = 32
    lambda_track: float = 1.0
    max_flow_displacement: float | None = None
    init_focal: float = 1.0
    focal_lo: float = 0.5
    focal_hi: float = 2.0
    focal_count: int = 60
    focal_temperature: float = 10.0
    early_stop_window: int = 0    # steps; 0 disables early stopping
    early_stop_delta: float = 1e-9

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"SolveConfig: unknown ablation {self.ablation!r}")
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.early_stop_window < 0:
            raise ValueError("SolveConfig: step counts must be non-negative")
        if min(self.lr, self.beta1, self.beta2, self.adam_eps) <= 0 or \
                max(self.beta1, self.beta2) >= 1:
            raise ValueError("SolveConfig: bad Adam hyperparameters")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def group_lr(self, group: str) -> float:
        override = getattr(self, f"lr_{group}")
        return self.lr if override is None else override

    def candidates(self) -> FocalCandidates:
        return FocalCandidates(np.linspace(self.focal_lo, self.focal_hi, self.focal_count),
                               self.focal_temperature)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, d: dict) -> "SolveConfig":
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SolveConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class SolveResult:
    poses: list[PoseSE3]              # world-to-camera
    depths: np.ndarray                # (F, H, W)
    focal: float
    loss_rows: list[tuple]            # (step, total, flow, track, focal, ate|None)
    breakdown: loss.LossBreakdown
    epe_mean: float
    config: SolveConfig

    def camera_centers(self) -> np.ndarray:
        return evalio.camera_centers(self.poses)


class Adam:
    """Standard Adam with per-parameter state and group learning rates."""

    def __init__(self, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        for name, g in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name] = params[name] - lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)


def _param_groups(cfg: SolveConfig, names) -> dict[str, float]:
    lrs = {}
    for n in names:
        if n == "depth_raw":
            lrs[n] = cfg.group_lr("depth")
        elif n.startswith("head_"):
            lrs[n] = cfg.group_lr("weights")
        elif n == "pose_raw":
            lrs[n] = cfg.group_lr("pose")
        elif n == "focal":
            lrs[n] = cfg.group_lr("focal")
        else:
            raise KeyError(f"unknown parameter group for {n}")
    return lrs


def _explicit_rt(pose_leaf: dc.Tensor, n_frames: int) -> tuple[dc.Tensor, dc.Tensor]:
    """Absolute pose tensors from the (F-1, 6) Euler+translation leaf."""
    angles = dc.slice_last(pose_leaf, 0, 3)
    trans = dc.slice_last(pose_leaf, 3, 6)
    rots = geometry.euler_matrices_t(angles)
    r_abs = dc.concat([dc.constant(np.eye(3)[None]), rots], axis=0)
    t_abs = dc.concat([dc.constant(np.zeros((1, 3))), trans], axis=0)
    return r_abs, t_abs


def _ate_or_none(r_abs: np.ndarray, t_abs: np.ndarray,
                 gt_centers: np.ndarray | None) -> float | None:
    if gt_centers is None:
        return None
    est = -np.einsum("fji,fj->fi", r_abs, t_abs)
    try:
        return evalio.ate(est, gt_centers)
    except DegenerateInputError:
        return None


def solve(flows: list[FlowField], tracks: TrackSet | None, width: int, height: int,
          cfg: SolveConfig, gt_poses: list[PoseSE3] | None = None,
          progress=None) -> SolveResult:
    """Run the full two-stage optimization on one correspondence set.

    ``gt_poses`` (world-to-camera) are only used to log per-step trajectory
    error; they never influence the solve. ``progress``, if given, is
    called as progress(step, breakdown) once per step.
    """
    ab = cfg.ablation
    if ab == "no_tracks":
        cfg_lambda = 0.0
    else:
        cfg_lambda = cfg.lambda_track
    prob = loss.build_problem(flows, tracks, width, height, cfg.lattice_nodes,
                              cfg.weight_stride, cfg.max_flow_displacement)
    n_frames = prob.n_frames
    rng = np.random.default_rng(cfg.seed)

    if ab == "explicit_depth":
        depth_param = FreeDepth(height, width, n_frames)
    else:
        depth_param = GridDepth(height, width, n_frames, cfg.depth_stride)
    params: dict[str, np.ndarray] = {"depth_raw": depth_param.init_raw()}

    head = None
    if ab != "no_weights":
        head = WeightHead(loss.WEIGHT_FEATURES)
        params.update(head.init_params(rng))
    if ab == "explicit_pose":
        params["pose_raw"] = np.zeros((n_frames - 1, 6))
    if ab == "explicit_focal":
        params["focal"] = np.asarray(cfg.init_focal, dtype=np.float64)

    cands = cfg.candidates()
    adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    gt_centers = None if gt_poses is None else evalio.camera_centers(gt_poses)
    rows: list[tuple] = []
    last_soft_focal = cfg.init_focal

    def run_forward(tape: dc.Tape):
        leaves = {name: tape.leaf(value) for name, value in params.items()}
        depth = depth_param.emit(leaves["depth_raw"])
        head_leaves = {n: leaves[n] for n in leaves if n.startswith("head_")} or None
        explicit_rt = None
        if ab == "explicit_pose":
            explicit_rt = _explicit_rt(leaves["pose_raw"], n_frames)
        if "focal" in leaves:
            mode, arg = "fixed", leaves["focal"]
        else:
            mode, arg = "soft", cands
        out = loss.forward(prob, depth, head, head_leaves, mode, arg,
                           cfg_lambda, explicit_rt)
        return leaves, depth, out

    for step in range(cfg.total_steps):
        if ab not in ("explicit_focal", "single_stage") and step == cfg.stage1_steps \
                and "focal" not in params:
            params["focal"] = np.asarray(last_soft_focal, dtype=np.float64)
        try:
            with dc.Tape() as tape:
                leaves, _, out = run_forward(tape)
                if not np.isfinite(out.total.data):
                    raise OptimizerDivergedError(
                        "non-finite loss", {"step": step, "breakdown": vars(out.breakdown)})
                grads = tape.backward(out.total)
        except ArithmeticError as exc:
            raise OptimizerDivergedError(
                "non-finite gradient", {"step": step, "detail": str(exc)}) from exc
        if out.soft_weights is not None:
            last_soft_focal = float(out.focal.data)
        g_by_name = {name: grads[t] for name, t in leaves.items()}
        if not all(np.all(np.isfinite(g)) for g in g_by_name.values()):
            raise OptimizerDivergedError("non-finite gradient", {"step": step})
        rows.append((step, out.breakdown.total, out.breakdown.flow, out.breakdown.track,
                     out.breakdown.focal,
                     _ate_or_none(out.r_abs.data, out.t_abs.data, gt_centers)))
        if progress is not None:
            progress(step, out.breakdown)
        adam.step(params, g_by_name, _param_groups(cfg, g_by_name))
        steps_done = step + 1
        if cfg.early_stop_window > 0 and step >= cfg.early_stop_window and \
                rows[step - cfg.early_stop_window][1] - rows[step][1] < cfg.early_stop_delta:
            break
    else:
        steps_done = cfg.total_steps

    with dc.Tape() as tape:
        _, depth, out = run_forward(tape)
    rows.append((steps_done, out.breakdown.total, out.breakdown.flow,
                 out.breakdown.track, out.breakdown.focal,
                 _ate_or_none(out.r_abs.data, out.t_abs.data, gt_centers)))
    poses = [PoseSE3(geometry._polar_rotation(r), t)
             for r, t in zip(out.r_abs.data, out.t_abs.data)]
    epe = float(np.mean(out.flow_residuals[out.flow_valid])) if out.flow_valid.any() else 0.0
    return SolveResult(poses, depth.data.copy(), float(out.focal.data), rows,
                       out.breakdown, epe, cfg)
