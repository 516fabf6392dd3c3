"""Pinhole camera model, SE(3) poses, and trajectory file I/O.

Conventions used across the package:

* Image coordinates are width-normalized: pixel (row i, col j) sits at
  ``(x, y) = (j / W, i / W)``, so x spans [0, 1) and y spans [0, H/W).
  Focal length is in the same width units; the principal point is fixed
  at the image center ``(0.5, H / (2 W))``.
* Cameras look along +z with x right and y down; ``PoseSE3`` maps world
  points into camera coordinates (``x_cam = R x_world + t``).
* Trajectory files store camera-to-world transforms, one frame per line:
  ``frame_index r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz``.

Functions suffixed ``_t`` are tape-op compositions of the same math for
use inside the differentiable pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowsfm import diffcore as dc

__all__ = [
    "Intrinsics",
    "PoseSE3",
    "EulerPose",
    "compose",
    "project",
    "unproject",
    "look_at",
    "pixel_grid",
    "rotation_angle",
    "save_trajectory",
    "load_trajectory",
    "unproject_t",
    "project_t",
    "apply_pose_t",
    "euler_matrices_t",
    "Z_MIN",
]

# Points with camera z below this are treated as invalid, never an error.
Z_MIN = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics in width-normalized units."""

    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.focal > 0.0:
            raise ValueError(f"Intrinsics: focal must be positive, got {self.focal}")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(float(focal), 0.5, height / (2.0 * width))


def project(points: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Camera-space points (..., 3) to width-normalized image coords (..., 2)."""
    z = points[..., 2]
    return np.stack([k.focal * points[..., 0] / z + k.cx,
                     k.focal * points[..., 1] / z + k.cy], axis=-1)


def unproject(uv: np.ndarray, depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Image coords (..., 2) plus depth (...,) to camera-space points (..., 3)."""
    x = (uv[..., 0] - k.cx) / k.focal * depth
    y = (uv[..., 1] - k.cy) / k.focal * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def _polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation to ``m`` (polar decomposition via SVD)."""
    u, _, vh = np.linalg.svd(m)
    r = u @ vh
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vh
    return r


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x_out = r @ x_in + t``."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"PoseSE3: bad shapes r{r.shape} t{t.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0.0:
            raise ValueError("PoseSE3: rotation not orthonormal with det +1")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.r.T + self.t

    def invert(self) -> "PoseSE3":
        return PoseSE3(self.r.T, -self.r.T @ self.t)

    def compose(self, after: "PoseSE3") -> "PoseSE3":
        """Transform applying ``self`` first, then ``after``."""
        return compose(self, after)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m


def compose(p_ij: PoseSE3, p_jk: PoseSE3) -> PoseSE3:
    """Chain relative transforms: i -> j composed with j -> k gives i -> k.

    The rotation product is re-orthonormalized through a polar
    decomposition so long chains cannot drift off SO(3).
    """
    r = _polar_rotation(p_jk.r @ p_ij.r)
    return PoseSE3(r, p_jk.r @ p_ij.t + p_jk.t)


@dataclass(frozen=True)
class EulerPose:
    """Minimal pose parameterization: y-x-z Euler angles plus translation."""

    yaw: float
    pitch: float
    roll: float
    tx: float
    ty: float
    tz: float

    def to_pose(self) -> PoseSE3:
        r = _euler_rotation(self.yaw, self.pitch, self.roll)
        return PoseSE3(r, np.array([self.tx, self.ty, self.tz]))


def _euler_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> PoseSE3:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should map to the camera's -y
    (image up); it must not be parallel to the view direction.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    x = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise ValueError("look_at: up is parallel to the view direction")
    x = x / n
    y = np.cross(fwd, x)
    r = np.stack([x, y, fwd])
    return PoseSE3(r, -r @ eye)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Width-normalized coordinates of all pixel centers, row-major (H*W, 2)."""
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([jj.ravel() / width, ii.ravel() / width], axis=-1).astype(np.float64)


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, stable near zero."""
    fro = np.linalg.norm(ra - rb)
    return float(2.0 * np.arcsin(np.clip(fro / (2.0 * np.sqrt(2.0)), 0.0, 1.0)))


# -- trajectory files -------------------------------------------------------


def save_trajectory(path, poses_c2w: list[PoseSE3]):
    """Write camera-to-world poses, one frame per line, full float64 precision."""
    with open(path, "w") as fh:
        for i, p in enumerate(poses_c2w):
            vals = np.concatenate([p.r.ravel(), p.t])
            fh.write(str(i) + " " + " ".join(f"{v:.17g}" for v in vals) + "\n")


def load_trajectory(path) -> list[PoseSE3]:
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 13:
                raise ValueError(f"trajectory line has {len(parts)} fields, expected 13")
            vals = np.array([float(v) for v in parts[1:]])
            poses.append(PoseSE3(vals[:9].reshape(3, 3), vals[9:]))
    return poses


# -- differentiable variants -------------------------------------------------


def unproject_t(uv: np.ndarray, depth: dc.Tensor, focal: dc.Tensor, k: Intrinsics) -> dc.Tensor:
    """Tape version of :func:`unproject`.

    ``uv`` is constant (N, 2); ``depth`` is a Tensor (..., N) and ``focal``
    must broadcast against (..., N, 1) (a leading candidate axis is fine).
    Returns camera-space points (..., N, 3).
    """
    off = dc.constant(np.asarray(uv) - np.array([k.cx, k.cy]))
    d1 = depth.reshape(depth.shape + (1,))
    xy = off * d1 / focal
    want = xy.shape[:-1] + (1,)
    if d1.shape != want:
        d1 = dc.broadcast_to(d1, want)
    return dc.concat([xy, d1], axis=-1)


def project_t(points: dc.Tensor, focal: dc.Tensor, k: Intrinsics) -> dc.Tensor:
    """Tape version of :func:`project` for points (..., 3) -> (..., 2).

    Entries with z <= Z_MIN are projected with z replaced by 1 to keep the
    graph finite; callers mask those lanes out of any reduction.
    """
    xy = dc.slice_last(points, 0, 2)
    z = dc.slice_last(points, 2, 3)
    z_safe = dc.where(z.data > Z_MIN, z, dc.constant(np.ones_like(z.data)))
    return focal * xy / z_safe + dc.constant(np.array([k.cx, k.cy]))


def apply_pose_t(r: dc.Tensor, t: dc.Tensor, points: dc.Tensor) -> dc.Tensor:
    """Rigid transform on the tape: (..., N, 3) @ r^T + t.

    ``r`` is (..., 3, 3) and ``t`` (..., 3); batch dims broadcast.
    """
    rt = dc.matmul(points, _transpose_last(r))
    return rt + t.reshape(t.shape[:-1] + (1, 3))


def _transpose_last(a: dc.Tensor) -> dc.Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return a.transpose(axes)


def euler_matrices_t(angles: dc.Tensor) -> dc.Tensor:
    """Rotation matrices (M, 3, 3) from Euler angles (M, 3) on the tape.

    Same y-x-z convention as :class:`EulerPose`.
    """
    m = angles.shape[0]
    zero = dc.constant(np.zeros((m, 1)))
    one = dc.constant(np.ones((m, 1)))

    def col(t, i):
        return dc.slice_last(t, i, i + 1)

    cy, sy = dc.cos(col(angles, 0)), dc.sin(col(angles, 0))
    cp, sp = dc.cos(col(angles, 1)), dc.sin(col(angles, 1))
    cr, sr = dc.cos(col(angles, 2)), dc.sin(col(angles, 2))

    def mat(entries):
        return dc.concat(entries, axis=-1).reshape(m, 3, 3)

    ry = mat([cy, zero, sy, zero, one, zero, -sy, zero, cy])
    rx = mat([one, zero, zero, zero, cp, -sp, zero, sp, cp])
    rz = mat([cr, -sr, zero, sr, cr, zero, zero, zero, one])
    return dc.matmul(ry, dc.matmul(rx, rz))
