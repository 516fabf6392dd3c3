"""Camera-induced flow loss: problem assembly and the differentiable forward.

For every adjacent frame pair each source pixel is unprojected with its
emitted depth, carried through the pair's relative pose, and reprojected;
the loss is the confidence-weighted mean L2 distance between these
induced correspondences and the measured ones (dense flow plus sparse
tracks). Poses come from the closed-form Procrustes solve on a fixed
lattice unless explicit pose variables are supplied, and the focal is
either a softmin blend over a candidate sweep or a free tensor.

Everything independent of the parameters (flow lookups, validity masks,
track pairings, lattices) is assembled once into a :class:`Problem`; the
per-step tape only records parameter-dependent work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowsfm import diffcore as dc
from flowsfm import geometry, intrinsicsolver, posesolver
from flowsfm.correspondence import FlowField, TrackSet
from flowsfm.depthparam import WeightHead, _node_count, _upsample_positions
from flowsfm.errors import DegenerateInputError
from flowsfm.geometry import Intrinsics, Z_MIN

__all__ = ["Problem", "ForwardResult", "LossBreakdown", "build_problem", "forward",
           "induced_correspondence", "residual_norms", "weighted_mean", "RESIDUAL_EPS"]

# Inside the sqrt of every residual norm, for differentiability at zero.
RESIDUAL_EPS = 1e-8

WEIGHT_FEATURES = 5  # u_x, u_y, flow_x, flow_y, source depth


@dataclass
class LossBreakdown:
    total: float
    flow: float
    track: float
    focal: float
    n_flow: int
    n_track: int


@dataclass
class ForwardResult:
    total: dc.Tensor
    flow: dc.Tensor
    track: dc.Tensor | None
    focal: dc.Tensor
    soft_weights: dc.Tensor | None
    r_rel: dc.Tensor
    t_rel: dc.Tensor
    r_abs: dc.Tensor
    t_abs: dc.Tensor
    flow_residuals: np.ndarray   # (B, P) data copy for metrics
    flow_valid: np.ndarray       # (B, P)
    breakdown: LossBreakdown


@dataclass
class Problem:
    """Constant (parameter-independent) description of one solve."""

    width: int
    height: int
    n_frames: int
    k0: Intrinsics                    # carries the principal point; focal unused
    uv_all: np.ndarray                # (P, 2)
    flow: np.ndarray                  # (B, H, W, 2) width-normalized
    flow_mask: np.ndarray             # (B, H, W)
    target_uv: np.ndarray             # (B, P, 2)
    target_x: np.ndarray              # (B, P) index units
    target_y: np.ndarray
    valid_px: np.ndarray              # (B, P)
    lattice: posesolver.SampleLattice
    # weight-field node lattice
    wnode_h: int
    wnode_w: int
    wnode_flat: np.ndarray            # (Mw,)
    wnode_feat: np.ndarray            # (B, Mw, 4) constant feature slice
    wpix_x: np.ndarray                # (B, P) pixel positions in node units
    wpix_y: np.ndarray
    # tracks, flattened to correspondences
    track_q: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    track_j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    track_uq: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    track_uj: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def n_pairs(self) -> int:
        return self.n_frames - 1

    @property
    def n_track_corr(self) -> int:
        return self.track_q.size


def induced_correspondence(uv: np.ndarray, depth: np.ndarray, k: Intrinsics,
                           pose: geometry.PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    """Where source pixels land in the target frame under a rigid motion.

    Plain-numpy counterpart of the tape forward, for metrics and tests:
    unproject ``uv`` (width units) with per-pixel ``depth``, apply the
    relative ``pose``, reproject. Returns (induced uv, valid mask); pixels
    landing at or behind the near plane are invalid (NaN position).
    """
    pts = pose.apply(geometry.unproject(uv, depth, k))
    valid = pts[:, 2] > Z_MIN
    out = np.full_like(uv, np.nan, dtype=np.float64)
    out[valid] = geometry.project(pts[valid], k)
    return out, valid


def build_problem(flows: list[FlowField], tracks: TrackSet | None, width: int, height: int,
                  sample_nodes: int = 32, weight_stride: int = 8,
                  max_flow_displacement: float | None = None) -> Problem:
    """Assemble all parameter-independent solve data.

    ``flows[i]`` is the field from frame i to i+1; ``tracks`` may be None.
    """
    b = len(flows)
    if b < 1:
        raise DegenerateInputError("build_problem: need at least two frames")
    n_frames = b + 1
    p = width * height
    uv_all = geometry.pixel_grid(width, height)

    flow = np.stack([f.flow for f in flows])
    mask = np.stack([f.mask for f in flows])
    flow_px_flat = flow.reshape(b, p, 2)
    target_uv = uv_all + flow_px_flat
    tx = target_uv[..., 0] * width
    ty = target_uv[..., 1] * width
    valid = mask.reshape(b, p).copy()
    valid &= (tx >= 0) & (tx <= width - 1) & (ty >= 0) & (ty <= height - 1)
    if max_flow_displacement is not None:
        valid &= np.linalg.norm(flow_px_flat, axis=-1) <= max_flow_displacement

    lattice = posesolver.make_lattice(width, height, sample_nodes)

    nh = _node_count(height, weight_stride)
    nw = _node_count(width, weight_stride)
    ncols = np.round(np.linspace(0, width - 1, nw)).astype(np.intp)
    nrows = np.round(np.linspace(0, height - 1, nh)).astype(np.intp)
    gc, gr = np.meshgrid(ncols, nrows)
    gc, gr = gc.ravel(), gr.ravel()
    wnode_flat = gr * width + gc
    node_uv = np.stack([gc / width, gr / width], axis=-1)
    wnode_feat = np.concatenate(
        [np.broadcast_to(node_uv, (b, gc.size, 2)), flow[:, gr, gc]], axis=-1)
    px_x, px_y = _upsample_positions(nh, nw, height, width)
    wpix_x = np.ascontiguousarray(np.broadcast_to(px_x, (b, p)))
    wpix_y = np.ascontiguousarray(np.broadcast_to(px_y, (b, p)))

    prob = Problem(width, height, n_frames, Intrinsics.centered(1.0, width, height),
                   uv_all, flow, mask, target_uv, tx, ty, valid, lattice,
                   nh, nw, wnode_flat, wnode_feat, wpix_x, wpix_y)

    if tracks is not None and tracks.n_tracks:
        if tracks.n_frames != n_frames:
            raise ValueError(
                f"build_problem: tracks cover {tracks.n_frames} frames, scene has {n_frames}")
        qs, js, uqs, ujs = [], [], [], []
        queries = tracks.query_frames()
        for t in range(tracks.n_tracks):
            q = queries[t]
            if q < 0:
                continue
            uq = tracks.pos[t, q]
            if not (0 <= uq[0] * width <= width - 1 and 0 <= uq[1] * width <= height - 1):
                continue
            for j in np.nonzero(tracks.visible[t])[0]:
                if j == q:
                    continue
                qs.append(q)
                js.append(j)
                uqs.append(uq)
                ujs.append(tracks.pos[t, j])
        if qs:
            prob.track_q = np.array(qs, dtype=np.intp)
            prob.track_j = np.array(js, dtype=np.intp)
            prob.track_uq = np.array(uqs)
            prob.track_uj = np.array(ujs)
    return prob


def residual_norms(delta: dc.Tensor) -> dc.Tensor:
    """Per-correspondence L2 norm with RESIDUAL_EPS inside the sqrt."""
    return dc.sqrt((delta * delta).sum(axis=-1) + RESIDUAL_EPS)


def weighted_mean(values: dc.Tensor, weights: dc.Tensor | None, valid: np.ndarray,
                  axis=None) -> dc.Tensor:
    """Confidence-weighted mean over valid lanes; invalid lanes contribute 0."""
    vmask = dc.constant(valid.astype(np.float64))
    w_eff = vmask if weights is None else weights * vmask
    with np.errstate(divide="ignore", invalid="ignore"):
        return (w_eff * values).sum(axis=axis) / w_eff.sum(axis=axis)


def _weight_field(prob: Problem, d_flat: dc.Tensor, head: WeightHead | None,
                  head_params: dict | None) -> dc.Tensor | None:
    """Per-pixel confidence field (B, P), or None for uniform weights."""
    if head is None:
        return None
    b = prob.n_pairs
    d_nodes = dc.take_cols(dc.narrow(d_flat, 0, b), prob.wnode_flat, unique=True)
    feats = dc.concat([dc.constant(prob.wnode_feat),
                       d_nodes.reshape(b, prob.wnode_flat.size, 1)], axis=-1)
    conf = head.apply(head_params, feats)
    grid = conf.reshape(b, prob.wnode_h, prob.wnode_w)
    return dc.bilinear_sample(grid, prob.wpix_x, prob.wpix_y)


def _pair_losses(prob: Problem, d_src_px: dc.Tensor, r: dc.Tensor, t: dc.Tensor,
                 focal: dc.Tensor, w_px: dc.Tensor | None, pair_slice: slice,
                 axis=None) -> tuple[dc.Tensor, np.ndarray, np.ndarray]:
    """Induced-vs-measured residual mean for a slice of frame pairs.

    Returns (loss, residual data, combined validity). Leading axes of
    ``r``/``t``/``focal`` broadcast (candidate sweeps).
    """
    x = geometry.unproject_t(prob.uv_all, d_src_px, focal, prob.k0)
    xj = geometry.apply_pose_t(r, t, x)
    z_ok = xj.data[..., 2] > Z_MIN
    uv_hat = geometry.project_t(xj, focal, prob.k0)
    res = residual_norms(uv_hat - dc.constant(prob.target_uv[pair_slice]))
    valid = prob.valid_px[pair_slice] & z_ok
    loss = weighted_mean(res, w_px, valid, axis=axis)
    return loss, res.data, valid


def forward(prob: Problem, depth: dc.Tensor, head: WeightHead | None, head_params: dict | None,
            focal_mode: str, focal_arg, lambda_track: float = 1.0,
            explicit_rt: tuple[dc.Tensor, dc.Tensor] | None = None) -> ForwardResult:
    """Evaluate the full camera-induced loss.

    ``focal_mode`` is ``"soft"`` (``focal_arg`` = FocalCandidates) or
    ``"fixed"`` (``focal_arg`` = scalar Tensor). ``explicit_rt`` supplies
    absolute pose tensors ((F, 3, 3), (F, 3)) and bypasses Procrustes.
    """
    f, h, w = depth.shape
    b, p = prob.n_pairs, prob.width * prob.height
    d_flat = depth.reshape(f, h * w)
    w_field = _weight_field(prob, d_flat, head, head_params)

    explicit_pose_rel = None
    if explicit_rt is not None:
        r_abs, t_abs = explicit_rt
        r_next, r_prev = dc.narrow(r_abs, 1, f), dc.narrow(r_abs, 0, b)
        r_rel = dc.matmul(r_next, _swap_last(r_prev))
        t_rel = dc.narrow(t_abs, 1, f) - dc.matmul(
            r_rel, dc.narrow(t_abs, 0, b).reshape(b, 3, 1)).reshape(b, 3)
        explicit_pose_rel = (dc.narrow(r_rel, 0, 1), dc.narrow(t_rel, 0, 1))

    soft_weights = None
    if focal_mode == "soft":
        cands: intrinsicsolver.FocalCandidates = focal_arg
        cand_losses = _candidate_losses(prob, d_flat, w_field, cands, explicit_pose_rel)
        focal, soft_weights = intrinsicsolver.soft_select_focal(
            cand_losses, cands.values, cands.temperature)
    elif focal_mode == "fixed":
        focal = focal_arg
    else:
        raise ValueError(f"forward: unknown focal_mode {focal_mode!r}")

    if explicit_rt is None:
        w_lat = None if w_field is None else dc.take_cols(w_field, prob.lattice.flat)
        matches = posesolver.build_matches(
            dc.narrow(depth, 0, b), dc.narrow(depth, 1, f), prob.flow, prob.flow_mask,
            prob.k0, focal, w_lat, prob.lattice)
        r_rel, t_rel = posesolver.solve_procrustes(matches)
        r_abs, t_abs = _chain_absolute(r_rel, t_rel)

    d_src = dc.narrow(d_flat, 0, b)
    flow_loss, res_data, valid = _pair_losses(
        prob, d_src, r_rel, t_rel, focal, w_field, slice(None))
    if not np.any(valid):
        raise DegenerateInputError("forward: no valid flow correspondences")

    track_loss = None
    n_track = 0
    if lambda_track > 0.0 and prob.n_track_corr:
        track_loss, n_track = _track_term(prob, d_flat, r_abs, t_abs, focal,
                                          head, head_params)
    if track_loss is not None:
        total = flow_loss + lambda_track * track_loss
    else:
        total = flow_loss

    breakdown = LossBreakdown(
        total=float(total.data), flow=float(flow_loss.data),
        track=0.0 if track_loss is None else float(track_loss.data),
        focal=float(focal.data), n_flow=int(valid.sum()), n_track=n_track)
    return ForwardResult(total, flow_loss, track_loss, focal, soft_weights,
                         r_rel, t_rel, r_abs, t_abs, res_data, valid, breakdown)


def _candidate_losses(prob: Problem, d_flat: dc.Tensor, w_field: dc.Tensor | None,
                      cands, explicit_pose_rel) -> dc.Tensor:
    """Per-candidate first-pair error (K,) for the focal sweep.

    Candidate errors are reported in pixel units: the softmin temperature
    is calibrated against pixel-scale error maps, and a width-normalized
    mean would flatten the selection into a near-uniform blend.
    """
    k = cands.values.size
    f_t = dc.constant(cands.values).reshape(k, 1, 1)
    w0 = None if w_field is None else dc.narrow(w_field, 0, 1)
    if explicit_pose_rel is not None:
        r, t = explicit_pose_rel
    else:
        w_lat = None if w0 is None else dc.take_cols(
            w0.reshape(1, prob.width * prob.height), prob.lattice.flat)
        h, w_ = prob.height, prob.width
        d0 = d_flat_row(d_flat, 0).reshape(1, h, w_)
        d1 = d_flat_row(d_flat, 1).reshape(1, h, w_)
        matches = posesolver.build_matches(
            d0, d1, prob.flow[0:1], prob.flow_mask[0:1], prob.k0, f_t, w_lat, prob.lattice)
        r, t = posesolver.solve_procrustes(matches)
    loss, _, _ = _pair_losses(prob, d_flat_row(d_flat, 0), r, t, f_t, w0,
                              slice(0, 1), axis=-1)
    return loss * float(prob.width)


def d_flat_row(d_flat: dc.Tensor, i: int) -> dc.Tensor:
    return dc.narrow(d_flat, i, i + 1)


def _chain_absolute(r_rel: dc.Tensor, t_rel: dc.Tensor) -> tuple[dc.Tensor, dc.Tensor]:
    """Compose relative poses into absolutes with frame 0 as the identity."""
    b = r_rel.shape[0]
    rs = [dc.constant(np.eye(3)[None])]
    ts = [dc.constant(np.zeros((1, 3)))]
    for i in range(b):
        ri = dc.narrow(r_rel, i, i + 1)
        ti = dc.narrow(t_rel, i, i + 1)
        rs.append(dc.matmul(ri, rs[-1]))
        ts.append(dc.matmul(ri, ts[-1].reshape(1, 3, 1)).reshape(1, 3) + ti)
    return dc.concat(rs, axis=0), dc.concat(ts, axis=0)


def _track_term(prob: Problem, d_flat: dc.Tensor, r_abs: dc.Tensor, t_abs: dc.Tensor,
                focal: dc.Tensor, head, head_params) -> tuple[dc.Tensor, int]:
    w, h, f = prob.width, prob.height, prob.n_frames
    uq, uj = prob.track_uq, prob.track_uj
    # One flattened bilinear over the stacked (F*H, W) maps; query rows
    # never cross a frame boundary because y stays within each band.
    sheet = d_flat.reshape(1, f * h, w)
    qx = (uq[:, 0] * w)[None]
    qy = (prob.track_q * h + uq[:, 1] * w)[None]
    d_q = dc.bilinear_sample(sheet, qx, qy).reshape(uq.shape[0])

    x_q = geometry.unproject_t(uq, d_q, focal, prob.k0)
    r_q = dc.take(r_abs, prob.track_q)
    t_q = dc.take(t_abs, prob.track_q)
    r_j = dc.take(r_abs, prob.track_j)
    t_j = dc.take(t_abs, prob.track_j)
    n = uq.shape[0]
    x_w = dc.matmul((x_q - t_q).reshape(n, 1, 3), r_q).reshape(n, 3)
    x_t = dc.matmul(x_w.reshape(n, 1, 3), _swap_last(r_j)).reshape(n, 3) + t_j
    z_ok = x_t.data[..., 2] > Z_MIN
    uv_hat = geometry.project_t(x_t, focal, prob.k0)
    res = residual_norms(uv_hat - dc.constant(uj))

    tx, ty = uj[:, 0] * w, uj[:, 1] * w
    valid = z_ok & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    weights = None
    if head is not None:
        feats = dc.concat([dc.constant(np.concatenate([uq, uj - uq], axis=-1)),
                           d_q.reshape(n, 1)], axis=-1)
        weights = head.apply(head_params, feats)
    if not np.any(valid):
        return dc.constant(0.0), 0
    return weighted_mean(res, weights, valid), int(valid.sum())


def _swap_last(t: dc.Tensor) -> dc.Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)
