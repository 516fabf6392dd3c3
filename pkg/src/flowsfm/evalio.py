"""Evaluation metrics and on-disk interchange formats.

Trajectory error is similarity-invariant: both trajectories are centered
and Frobenius-normalized, the best rotation is solved in closed form, and
the RMSE of the aligned positions is reported. Depth error is the
scale-invariant log RMSE, pooled over all frames. Point clouds go to
binary little-endian PLY; depth maps to grayscale PFM (also little-endian,
rows bottom to top, as the format requires).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from flowsfm import geometry
from flowsfm.diffcore import ShapeError
from flowsfm.errors import DegenerateInputError
from flowsfm.geometry import Intrinsics, PoseSE3

__all__ = ["ate", "depth_si_rmse", "focal_abs_err", "camera_centers",
           "read_pfm", "write_pfm", "read_ply", "write_ply", "export_ply",
           "write_metrics", "write_loss_csv", "read_loss_csv", "write_run_info",
           "LOSS_CSV_HEADER"]


def camera_centers(poses: list[PoseSE3]) -> np.ndarray:
    """World-frame camera centers of world-to-camera poses, shape (F, 3)."""
    return np.stack([-p.r.T @ p.t for p in poses])


def _normalize(pos: np.ndarray, label: str) -> np.ndarray:
    centered = pos - pos.mean(axis=0)
    scale = np.linalg.norm(centered)
    if scale < 1e-12:
        raise DegenerateInputError(f"ate: {label} trajectory has no spatial extent")
    return centered / scale


def ate(est_pos: np.ndarray, gt_pos: np.ndarray) -> float:
    """Similarity-aligned RMSE between camera-center trajectories.

    Both inputs are (F, 3) positions. Translation and scale are removed by
    centering and Frobenius normalization, rotation by a closed-form
    orthogonal Procrustes solve, so the result is invariant to any
    similarity transform of either input.
    """
    est_pos = np.asarray(est_pos, dtype=np.float64)
    gt_pos = np.asarray(gt_pos, dtype=np.float64)
    if est_pos.shape != gt_pos.shape or est_pos.ndim != 2 or est_pos.shape[1] != 3:
        raise ValueError(f"ate: shape mismatch {est_pos.shape} vs {gt_pos.shape}")
    if est_pos.shape[0] < 3:
        raise DegenerateInputError("ate: need at least 3 poses")
    x = _normalize(est_pos, "estimated")
    y = _normalize(gt_pos, "reference")
    u, _, vt = np.linalg.svd(x.T @ y)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return float(np.sqrt(np.mean(np.sum((x @ r.T - y) ** 2, axis=-1))))


def depth_si_rmse(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Scale-invariant log-depth RMSE, pooled over every frame and pixel."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"depth_si_rmse: shape mismatch {est.shape} vs {gt.shape}")
    valid = (est > 0) & (gt > 0)
    if mask is not None:
        valid &= mask
    if valid.sum() < 2:
        raise DegenerateInputError("depth_si_rmse: fewer than 2 valid depth pixels")
    diff = np.log(est[valid]) - np.log(gt[valid])
    return float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))


def focal_abs_err(est: float, gt: float) -> float:
    return float(abs(est - gt))


# -- PFM depth maps ----------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian, bottom row first."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"write_pfm: need 2-D data, got {data.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"read_pfm: {path} is not a grayscale PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(np.float64)


# -- PLY point clouds --------------------------------------------------------


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float positions and optional u8 RGB."""
    points = np.asarray(points, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"write_ply: need (N, 3) points, got {points.shape}")
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {points.shape[0]}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (points.shape[0], 3):
            raise ValueError(f"write_ply: colors {colors.shape} do not match points")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is None:
            f.write(np.ascontiguousarray(points).tobytes())
        else:
            rec = np.zeros(points.shape[0], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"], rec["rgb"] = points, colors
            f.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"read_ply: {path} is not a PLY file")
        n, props = 0, []
        while True:
            line = f.readline().strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"format" and parts[1] != b"binary_little_endian":
                raise ValueError(f"read_ply: unsupported format {parts[1]!r}")
            if parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise ValueError(f"read_ply: unsupported element {parts[1]!r}")
                n = int(parts[2])
            if parts[0] == b"property":
                props.append((parts[1], parts[2]))
        has_rgb = len(props) == 6
        if not (len(props) == 3 or has_rgb):
            raise ValueError(f"read_ply: unsupported property layout {props}")
        dtype = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_rgb else [])
        rec = np.frombuffer(f.read(), dtype=dtype, count=n)
    pts = rec["xyz"].astype(np.float64)
    return pts, (rec["rgb"].copy() if has_rgb else None)


def export_ply(path, depths: np.ndarray, k: Intrinsics,
               poses: list[PoseSE3] | PoseSE3, stride: int = 1) -> int:
    """Fuse depth frames into a world-frame point cloud; returns the count.

    ``depths`` is (F, H, W) or a single (H, W) frame; ``poses`` are
    world-to-camera, one per frame. Points are shaded by normalized inverse
    depth so nearer geometry renders brighter.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 2:
        depths = depths[None]
    if isinstance(poses, PoseSE3):
        poses = [poses]
    if depths.shape[0] == 0:
        raise DegenerateInputError("export_ply: empty frame set")
    if len(poses) != depths.shape[0]:
        raise ShapeError(f"export_ply: {depths.shape[0]} depth frames "
                         f"vs {len(poses)} poses")
    h, w = depths.shape[1:]
    uv = geometry.pixel_grid(w, h).reshape(h, w, 2)[::stride, ::stride].reshape(-1, 2)
    all_pts, all_inv = [], []
    for depth, pose in zip(depths, poses):
        d = depth[::stride, ::stride].reshape(-1)
        keep = d > 0
        if not keep.any():
            continue
        pts_cam = geometry.unproject(uv[keep], d[keep], k)
        all_pts.append(pose.invert().apply(pts_cam))
        all_inv.append(1.0 / d[keep])
    if not all_pts:
        raise DegenerateInputError("export_ply: no positive depths")
    pts = np.concatenate(all_pts)
    inv = np.concatenate(all_inv)
    lo, hi = inv.min(), inv.max()
    shade = np.full_like(inv, 0.5) if hi - lo < 1e-12 else (inv - lo) / (hi - lo)
    gray = np.clip(np.round(255 * shade), 0, 255).astype(np.uint8)
    write_ply(path, pts, np.stack([gray, gray, gray], axis=-1))
    return len(pts)


# -- run artifacts -----------------------------------------------------------

LOSS_CSV_HEADER = "step,total,flow,track,focal,ate_if_gt"


def write_metrics(path, metrics: dict) -> None:
    """Deterministic metrics JSON: sorted keys, fixed float formatting."""
    with open(path, "w") as f:
        json.dump({k: metrics[k] for k in sorted(metrics)}, f, indent=2, sort_keys=True)
        f.write("\n")


def write_loss_csv(path, rows: list[tuple]) -> None:
    with open(path, "w") as f:
        f.write(LOSS_CSV_HEADER + "\n")
        for step, total, flow, track, focal, ate_v in rows:
            f.write("%d,%.17g,%.17g,%.17g,%.17g,%s\n"
                    % (step, total, flow, track, focal,
                       "" if ate_v is None else "%.17g" % ate_v))


def write_run_info(path, info: dict) -> None:
    with open(path, "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def read_loss_csv(path) -> list[tuple]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != LOSS_CSV_HEADER:
            raise ValueError(f"read_loss_csv: unexpected header {header!r}")
        for line in f:
            s, total, flow, track, focal, ate_v = line.rstrip("\n").split(",")
            rows.append((int(s), float(total), float(flow), float(track),
                         float(focal), None if ate_v == "" else float(ate_v)))
    return rows
