"""Correspondence containers, their file formats, and frame subsampling.

In-memory flow and track positions are width-normalized float64; the
files store raw pixels (float32 for flow) and conversion happens only at
the I/O boundary.

Flow file layout (little-endian): magic ``FLO1``, uint32 width, uint32
height, ``2*w*h`` float32 flow (dx, dy in pixels, interleaved per pixel,
row-major), then ``w*h`` uint8 validity mask.

Track CSV: header ``track_id,frame,px,py,visible``, one row per
(track, frame). A track's query frame is its first visible frame.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from flowsfm.errors import DegenerateInputError

__all__ = [
    "FlowField",
    "TrackSet",
    "SubsampleResult",
    "write_flow",
    "read_flow",
    "write_tracks",
    "read_tracks",
    "lookup_flow",
    "subsample_frames",
]

FLOW_MAGIC = b"FLO1"


@dataclass
class FlowField:
    """Dense flow for one frame pair, width-normalized, plus validity."""

    flow: np.ndarray  # (H, W, 2) float64
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.flow.ndim != 3 or self.flow.shape[2] != 2 or self.mask.shape != self.flow.shape[:2]:
            raise ValueError(f"FlowField: bad shapes {self.flow.shape}, {self.mask.shape}")
        if not np.all(np.isfinite(self.flow[self.mask])):
            raise ValueError("FlowField: non-finite flow inside the valid mask")

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]


@dataclass
class TrackSet:
    """Sparse tracks: positions (T, F, 2) width-normalized, visibility (T, F)."""

    pos: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        if self.pos.ndim != 3 or self.pos.shape[2] != 2 or self.visible.shape != self.pos.shape[:2]:
            raise ValueError(f"TrackSet: bad shapes {self.pos.shape}, {self.visible.shape}")
        if not np.all(np.isfinite(self.pos[self.visible])):
            raise ValueError("TrackSet: non-finite position on a visible frame")

    @property
    def n_tracks(self) -> int:
        return self.pos.shape[0]

    @property
    def n_frames(self) -> int:
        return self.pos.shape[1]

    def query_frames(self) -> np.ndarray:
        """First visible frame per track; -1 for never-visible tracks."""
        any_vis = self.visible.any(axis=1)
        q = np.argmax(self.visible, axis=1)
        return np.where(any_vis, q, -1)


# -- flow files --------------------------------------------------------------


def write_flow(path, flow_px: np.ndarray, mask: np.ndarray):
    """Write pixel-unit flow (H, W, 2) and mask (H, W) to the binary format."""
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(flow_px, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_flow(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back (flow_px float32 (H, W, 2), mask bool (H, W))."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"{path}: bad flow magic {magic!r}")
        w, h = np.frombuffer(fh.read(8), dtype="<u4")
        w, h = int(w), int(h)
        flow = np.frombuffer(fh.read(8 * w * h), dtype="<f4").reshape(h, w, 2)
        mask = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return flow.copy(), mask.astype(bool)


def flow_to_field(flow_px: np.ndarray, mask: np.ndarray, width: int) -> FlowField:
    """Boundary conversion from pixel units to the in-memory representation."""
    return FlowField(np.asarray(flow_px, dtype=np.float64) / width, np.asarray(mask, dtype=bool))


# -- track files -------------------------------------------------------------


def write_tracks(path, pos_px: np.ndarray, visible: np.ndarray):
    n_tracks, n_frames, _ = pos_px.shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["track_id", "frame", "px", "py", "visible"])
        for t in range(n_tracks):
            for f in range(n_frames):
                x, y = pos_px[t, f]
                if not (np.isfinite(x) and np.isfinite(y)):
                    x, y = 0.0, 0.0
                out.writerow([t, f, f"{x:.17g}", f"{y:.17g}", int(visible[t, f])])


def read_tracks(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back (pos_px (T, F, 2) float64, visible (T, F) bool)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((int(row["track_id"]), int(row["frame"]),
                         float(row["px"]), float(row["py"]), int(row["visible"])))
    if not rows:
        return np.zeros((0, 0, 2)), np.zeros((0, 0), dtype=bool)
    n_tracks = max(r[0] for r in rows) + 1
    n_frames = max(r[1] for r in rows) + 1
    pos = np.zeros((n_tracks, n_frames, 2))
    vis = np.zeros((n_tracks, n_frames), dtype=bool)
    for t, f, x, y, v in rows:
        pos[t, f] = (x, y)
        vis[t, f] = bool(v)
    return pos, vis


def tracks_to_set(pos_px: np.ndarray, visible: np.ndarray, width: int) -> TrackSet:
    """Boundary conversion to width units; drops tracks that are not
    correspondences (visible in fewer than 2 frames), with a warning."""
    pos = np.asarray(pos_px, dtype=np.float64) / width
    vis = np.asarray(visible, dtype=bool)
    keep = vis.sum(axis=1) >= 2
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        warnings.warn(f"dropped {dropped} tracks visible in fewer than 2 frames",
                      stacklevel=2)
    return TrackSet(pos[keep], vis[keep])


# -- flow lookup -------------------------------------------------------------


def lookup_flow(field: FlowField, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear flow at width-normalized points (N, 2) -> (vectors, valid).

    A sample is valid only when inside the image and all four supporting
    mask bits are set.
    """
    h, w = field.mask.shape
    x = uv[:, 0] * w
    y = uv[:, 1] * w
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (np.clip(x, 0, w - 1) - x0)[:, None]
    fy = (np.clip(y, 0, h - 1) - y0)[:, None]
    v = (field.flow[y0, x0] * (1 - fy) * (1 - fx) + field.flow[y0, x1] * (1 - fy) * fx
         + field.flow[y1, x0] * fy * (1 - fx) + field.flow[y1, x1] * fy * fx)
    corners_ok = field.mask[y0, x0] & field.mask[y0, x1] & field.mask[y1, x0] & field.mask[y1, x1]
    return v, inside & corners_ok


# -- frame subsampling -------------------------------------------------------


@dataclass
class SubsampleResult:
    indices: np.ndarray              # selected frame indices, strictly increasing
    gap_flow: np.ndarray             # accumulated flow between consecutive selections
    levels: np.ndarray = field(default=None, repr=False)


def subsample_frames(per_step_magnitude, target_count: int) -> SubsampleResult:
    """Pick ``target_count`` frames spreading cumulative flow evenly.

    Frame k sits at cumulative flow C(k); for each of the equally spaced
    levels t * C_total / (target_count - 1) the two frames bracketing the
    level are compared and the nearer one picked, ties toward the earlier
    frame. Endpoints are always included; duplicates collapse, so the
    result may be shorter (or, around a single dominant gap, longer) than
    requested.
    """
    mags = np.asarray(per_step_magnitude, dtype=np.float64)
    if mags.ndim != 1:
        raise ValueError(f"subsample_frames: magnitudes must be 1-D, got {mags.shape}")
    if np.any(mags < 0) or not np.all(np.isfinite(mags)):
        raise ValueError("subsample_frames: magnitudes must be finite and >= 0")
    n = mags.size + 1
    if target_count < 2:
        raise ValueError("subsample_frames: target_count must be >= 2")
    cum = np.concatenate([[0.0], np.cumsum(mags)])
    if target_count >= n:
        idx = np.arange(n)
        return SubsampleResult(idx, mags.copy(), cum.copy())
    levels = np.linspace(0.0, cum[-1], target_count)
    picked = {0, n - 1}
    for lv in levels:
        hi = int(np.searchsorted(cum, lv, side="left"))
        hi = min(hi, n - 1)
        lo = hi - 1
        if lo < 0 or abs(cum[hi] - lv) < abs(cum[lo] - lv):
            picked.add(hi)
        else:
            picked.add(lo)
    idx = np.array(sorted(picked), dtype=np.intp)
    gap = np.array([cum[b] - cum[a] for a, b in zip(idx[:-1], idx[1:])])
    return SubsampleResult(idx, gap, levels)
