"""Differentiable batched 3x3 singular value decomposition.

Factorization is delegated to ``np.linalg.svd``; the backward pass is
the standard square-matrix SVD adjoint with the spectral-gap reciprocals
1/(s_b^2 - s_a^2) replaced by the damped form
(s_b^2 - s_a^2)/((s_b^2 - s_a^2)^2 + eps * s_1^4), so near-degenerate
spectra yield finite gradients instead of blowups. Scaling the damping
by the largest singular value keeps the adjoint scale-invariant: the
tiny covariances of width-normalized point clouds must not be treated
as degenerate. An exactly repeated spectrum still maps to zero. The
Procrustes det-sign correction downstream is constant w.r.t. the
decomposition, so no special casing is needed here.
"""

import numpy as np

from flowsfm.diffcore.tape import ShapeError, Tensor, _accumulate, _tape

__all__ = ["svd3", "GAP_EPS"]

GAP_EPS = 1e-10


def svd3(a: Tensor):
    """Full SVD of (..., 3, 3) input; returns (U, S, V) with A = U @ diag(S) @ V^T."""
    if a.data.shape[-2:] != (3, 3):
        raise ShapeError(f"svd3: expected (..., 3, 3), got {a.data.shape}")
    u_data, s_data, vh_data = np.linalg.svd(a.data)
    v_data = np.swapaxes(vh_data, -1, -2)

    tape = _tape()
    needs = tape is not None and a.requires_grad
    u = Tensor(u_data, requires_grad=needs)
    s = Tensor(s_data, requires_grad=needs)
    v = Tensor(v_data, requires_grad=needs)
    if not needs:
        return u, s, v

    def record():
        gu, gs, gv = u.grad, s.grad, v.grad
        if gu is None and gs is None and gv is None:
            return
        for g in (gu, gs, gv):
            if g is not None and not np.all(np.isfinite(g)):
                raise ArithmeticError("svd3 backward: non-finite upstream gradient")
        s2 = s_data * s_data
        gap = s2[..., None, :] - s2[..., :, None]
        # the tiny floor keeps an all-zero spectrum at f = 0, not 0/0
        scale = np.maximum(s2[..., 0] * s2[..., 0], np.finfo(np.float64).tiny)
        f = gap / (gap * gap + GAP_EPS * scale[..., None, None])
        mid = np.zeros_like(a.data)
        if gu is not None:
            m = np.swapaxes(u_data, -1, -2) @ gu
            mid += (f * (m - np.swapaxes(m, -1, -2))) * s_data[..., None, :]
        if gv is not None:
            n = np.swapaxes(v_data, -1, -2) @ gv
            mid += s_data[..., :, None] * (f * (n - np.swapaxes(n, -1, -2)))
        if gs is not None:
            mid += gs[..., None, :] * np.eye(3)
        _accumulate(a, u_data @ mid @ vh_data)

    tape._record(record)
    return u, s, v
