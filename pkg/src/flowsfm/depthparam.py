"""Depth parameterizations and the correspondence-confidence head.

``GridDepth`` stands in for the paper-scale depth network: a low-res
per-frame parameter grid, softplus-activated and bilinearly upsampled to
full resolution, plus a small positive floor. ``FreeDepth`` is the
per-pixel variant used by the explicit-depth ablation. Both emit through
the tape so gradients reach the raw parameters.

``WeightHead`` maps per-correspondence feature vectors to confidences in
(0, 1) through a 3-layer ReLU MLP with a sigmoid output. Hidden layers
are He-initialized from the run seed; the final layer starts at zero so
every confidence begins at 0.5.
"""

from __future__ import annotations

import numpy as np

from flowsfm import diffcore as dc

__all__ = ["GridDepth", "FreeDepth", "WeightHead", "D_FLOOR"]

D_FLOOR = 1e-3


def _node_count(extent: int, stride: int) -> int:
    if extent <= 1:
        return 1
    return int(np.ceil((extent - 1) / stride)) + 1


def _upsample_positions(gh: int, gw: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid-index sample positions for every output pixel (align corners)."""
    xs = np.arange(w) * ((gw - 1) / (w - 1) if w > 1 else 0.0)
    ys = np.arange(h) * ((gh - 1) / (h - 1) if h > 1 else 0.0)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


class GridDepth:
    """Per-frame depth grid at a fixed stride, upsampled to (H, W)."""

    def __init__(self, height: int, width: int, n_frames: int, stride: int = 8):
        self.height = height
        self.width = width
        self.n_frames = n_frames
        self.stride = stride
        self.grid_h = _node_count(height, stride)
        self.grid_w = _node_count(width, stride)
        gx, gy = _upsample_positions(self.grid_h, self.grid_w, height, width)
        n = gx.size
        self._sx = np.ascontiguousarray(np.broadcast_to(gx, (n_frames, n)))
        self._sy = np.ascontiguousarray(np.broadcast_to(gy, (n_frames, n)))

    def init_raw(self) -> np.ndarray:
        return np.zeros((self.n_frames, self.grid_h, self.grid_w))

    def emit(self, raw: dc.Tensor) -> dc.Tensor:
        """Raw grid (F, gh, gw) -> positive depth maps (F, H, W)."""
        act = dc.softplus(raw)
        up = dc.bilinear_sample(act, self._sx, self._sy)
        return up.reshape(self.n_frames, self.height, self.width) + D_FLOOR


class FreeDepth:
    """One raw parameter per pixel; the explicit-depth ablation."""

    def __init__(self, height: int, width: int, n_frames: int):
        self.height = height
        self.width = width
        self.n_frames = n_frames

    def init_raw(self) -> np.ndarray:
        return np.zeros((self.n_frames, self.height, self.width))

    def emit(self, raw: dc.Tensor) -> dc.Tensor:
        return dc.softplus(raw) + D_FLOOR


class WeightHead:
    """3-layer MLP (in -> 128 -> 128 -> 1), ReLU hidden, sigmoid output."""

    HIDDEN = 128

    def __init__(self, in_dim: int):
        self.in_dim = in_dim

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        h = self.HIDDEN
        return {
            "head_w1": rng.normal(0.0, np.sqrt(2.0 / self.in_dim), size=(self.in_dim, h)),
            "head_b1": np.zeros(h),
            "head_w2": rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h)),
            "head_b2": np.zeros(h),
            "head_w3": np.zeros((h, 1)),
            "head_b3": np.zeros(1),
        }

    def apply(self, params: dict[str, dc.Tensor], feats: dc.Tensor) -> dc.Tensor:
        """Features (..., N, in_dim) -> confidences (..., N) in (0, 1)."""
        h1 = dc.relu(dc.matmul(feats, params["head_w1"]) + params["head_b1"])
        h2 = dc.relu(dc.matmul(h1, params["head_w2"]) + params["head_b2"])
        out = dc.matmul(h2, params["head_w3"]) + params["head_b3"]
        return dc.sigmoid(out.reshape(out.shape[:-1]))
