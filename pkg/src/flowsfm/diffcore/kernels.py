"""Bilinear gather/scatter kernels with compiled and numpy backends.

These two loops dominate solver runtime (depth sampling at flow targets
and the low-res depth grid upsampling backward), so a Cython build of
them ships as ``flowsfm.diffcore._bilinear``. The numpy fallback below
is arithmetic-identical: both backends clamp to the border, evaluate
corner weights in the same order, and accumulate scatter contributions
corner-by-corner, so results match bit for bit.

Set ``FLOWSFM_NO_EXT=1`` to force the numpy backend.
"""

import os

import numpy as np

__all__ = [
    "bilinear_gather",
    "bilinear_scatter",
    "using_compiled_kernels",
    "bilinear_gather_numpy",
    "bilinear_scatter_numpy",
]


def _corner_setup(x, y, h, w):
    """Clamped corner indices and fractional offsets for (B, N) samples."""
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return x0, y0, x1, y1, fx, fy


def bilinear_gather_numpy(src, x, y):
    """Sample ``src`` (B, H, W) at positions ``x``/``y`` (B, N); returns (B, N)."""
    b, h, w = src.shape
    x0, y0, x1, y1, fx, fy = _corner_setup(x, y, h, w)
    rows = np.arange(b, dtype=np.intp)[:, None]
    v00 = src[rows, y0, x0]
    v01 = src[rows, y0, x1]
    v10 = src[rows, y1, x0]
    v11 = src[rows, y1, x1]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    return ((v00 * w00 + v01 * w01) + v10 * w10) + v11 * w11


def bilinear_scatter_numpy(gout, x, y, h, w):
    """Adjoint of the gather: accumulate (B, N) values into a (B, H, W) grid."""
    b, _ = gout.shape
    x0, y0, x1, y1, fx, fy = _corner_setup(x, y, h, w)
    rows = np.broadcast_to(np.arange(b, dtype=np.intp)[:, None], gout.shape)
    out = np.zeros((b, h, w), dtype=np.float64)
    np.add.at(out, (rows, y0, x0), gout * ((1.0 - fy) * (1.0 - fx)))
    np.add.at(out, (rows, y0, x1), gout * ((1.0 - fy) * fx))
    np.add.at(out, (rows, y1, x0), gout * (fy * (1.0 - fx)))
    np.add.at(out, (rows, y1, x1), gout * (fy * fx))
    return out


_compiled = None
if not os.environ.get("FLOWSFM_NO_EXT"):
    try:
        from flowsfm.diffcore import _bilinear as _compiled
    except ImportError:
        _compiled = None


def using_compiled_kernels():
    return _compiled is not None


def bilinear_gather(src, x, y):
    src = np.ascontiguousarray(src, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _compiled is not None:
        return _compiled.bilinear_gather(src, x, y)
    return bilinear_gather_numpy(src, x, y)


def bilinear_scatter(gout, x, y, h, w):
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _compiled is not None:
        return _compiled.bilinear_scatter(gout, x, y, h, w)
    return bilinear_scatter_numpy(gout, x, y, h, w)
