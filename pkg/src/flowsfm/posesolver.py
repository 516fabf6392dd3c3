"""Closed-form differentiable pose estimation from matched depth clouds.

For each frame pair the two sides of every correspondence are unprojected
to camera-space 3D points and the relative pose is the minimizer of the
confidence-weighted rigid alignment residual, solved via the weighted
Kabsch construction: weighted centroids, weighted cross-covariance, one
3x3 SVD, an orientation sign fix, and the translation closing the
centroids. Everything runs on the tape; the det-based sign fix is
treated as locally constant so gradients flow only through U, V and the
centroids.

Batched shapes are first-class: a leading axis over frame pairs (or over
focal candidates) is carried through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowsfm import diffcore as dc
from flowsfm import geometry
from flowsfm.errors import DegenerateInputError

__all__ = ["SampleLattice", "MatchedClouds", "make_lattice", "build_matches", "solve_procrustes"]

# Clouds whose cross-covariance second singular value falls below this
# fraction of the first cannot pin a rotation (collinear geometry).
RANK_TOL = 1e-9


@dataclass(frozen=True)
class SampleLattice:
    """Fixed near-uniform pixel lattice used for pose estimation."""

    cols: np.ndarray       # (M,) integer pixel columns
    rows: np.ndarray       # (M,) integer pixel rows
    flat: np.ndarray       # (M,) row-major flat indices
    uv: np.ndarray         # (M, 2) width-normalized coordinates

    @property
    def count(self) -> int:
        return self.flat.size


def make_lattice(width: int, height: int, nodes: int = 32) -> SampleLattice:
    """Uniformly spaced integer pixel lattice, at most ``nodes`` per axis.

    Integer centers keep source-side depth lookups exact gathers.
    """
    cs = np.unique(np.round(np.linspace(0, width - 1, min(nodes, width))).astype(np.intp))
    rs = np.unique(np.round(np.linspace(0, height - 1, min(nodes, height))).astype(np.intp))
    cols, rows = np.meshgrid(cs, rs)
    cols, rows = cols.ravel(), rows.ravel()
    uv = np.stack([cols / width, rows / width], axis=-1).astype(np.float64)
    return SampleLattice(cols, rows, rows * width + cols, uv)


@dataclass
class MatchedClouds:
    """Correspondence clouds for one (batched) rigid alignment problem."""

    x_i: dc.Tensor          # (..., M, 3) source-frame points
    x_j: dc.Tensor          # (..., M, 3) target-frame points
    weights: dc.Tensor      # (..., M) confidences, zeroed on invalid lanes
    valid: np.ndarray       # (..., M) bool
    n_valid: np.ndarray     # (...,) valid count per problem


def build_matches(depth_i: dc.Tensor, depth_j: dc.Tensor, flow: np.ndarray,
                  mask: np.ndarray, k: geometry.Intrinsics, focal: dc.Tensor,
                  weights: dc.Tensor | None, lattice: SampleLattice) -> MatchedClouds:
    """Lift lattice correspondences of a batch of frame pairs to 3D.

    ``depth_i``/``depth_j`` are (B, H, W) tensors, ``flow`` (B, H, W, 2)
    width-normalized with validity ``mask`` (B, H, W). ``focal`` may carry
    extra leading axes (candidate sweeps); ``weights`` is (B, M) or None
    for uniform confidence.
    """
    b, h, w = depth_i.shape
    m = lattice.count
    d_i = dc.take_cols(depth_i.reshape(b, h * w), lattice.flat, unique=True)

    flow_s = flow[:, lattice.rows, lattice.cols]          # (B, M, 2) constant
    valid = mask[:, lattice.rows, lattice.cols].copy()
    target = lattice.uv + flow_s                          # (B, M, 2)
    tx, ty = target[..., 0] * w, target[..., 1] * w
    valid &= (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)

    d_j = dc.bilinear_sample(depth_j, tx, ty)             # (B, M)
    x_i = geometry.unproject_t(lattice.uv, d_i, focal, k)
    x_j = geometry.unproject_t(target, d_j, focal, k)

    ones = dc.constant(np.ones((b, m)))
    weights = ones if weights is None else weights
    weights = weights * dc.constant(valid.astype(np.float64))
    n_valid = valid.sum(axis=-1)
    if np.any(n_valid < 3):
        raise DegenerateInputError(
            f"build_matches: a frame pair has {int(n_valid.min())} valid matches, need >= 3")
    # Broadcast weights up to the cloud batch shape (candidate sweeps).
    want = x_i.shape[:-1]
    if weights.shape != want:
        weights = dc.broadcast_to(weights, want)
        valid = np.broadcast_to(valid, want)
    return MatchedClouds(x_i, x_j, weights, valid, n_valid)


def solve_procrustes(m: MatchedClouds) -> tuple[dc.Tensor, dc.Tensor]:
    """Weighted rigid alignment x_j ~ R @ x_i + t, batched.

    Returns (R (..., 3, 3), t (..., 3)). Raises DegenerateInputError when
    the weighted clouds are collinear (cross-covariance rank < 2).
    """
    wsum = m.weights.sum(axis=-1, keepdims=True)
    if np.any(wsum.data <= 0.0):
        raise DegenerateInputError("solve_procrustes: all confidences zero for a pair")
    wn = m.weights / wsum                                  # (..., M)
    w1 = wn.reshape(wn.shape + (1,))
    mu_i = (w1 * m.x_i).sum(axis=-2, keepdims=True)        # (..., 1, 3)
    mu_j = (w1 * m.x_j).sum(axis=-2, keepdims=True)
    a = m.x_i - mu_i
    bcent = m.x_j - mu_j
    cov = dc.matmul(_swap_last(a * w1), bcent)             # (..., 3, 3)

    u, s, v = dc.svd3(cov)
    sv = s.data
    if np.any(sv[..., 1] <= RANK_TOL * np.maximum(sv[..., 0], 1e-300)):
        raise DegenerateInputError("solve_procrustes: collinear weighted clouds (rank < 2)")
    sign = np.sign(np.linalg.det(v.data @ np.swapaxes(u.data, -1, -2)))
    fix = np.zeros(sv.shape[:-1] + (3, 3))
    fix[..., 0, 0] = 1.0
    fix[..., 1, 1] = 1.0
    fix[..., 2, 2] = sign
    r = dc.matmul(dc.matmul(v, dc.constant(fix)), _swap_last(u))
    t = mu_j.reshape(mu_j.shape[:-2] + (3,)) - dc.matmul(
        r, mu_i.reshape(mu_i.shape[:-2] + (3, 1))).reshape(r.shape[:-2] + (3,))
    return r, t


def _swap_last(t: dc.Tensor) -> dc.Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)
