"""Softmin focal selection over a fixed candidate sweep.

During the first optimization stage the shared focal length is not a free
variable: a fixed grid of candidates is scored by the first-pair loss and
blended with a softmin, which keeps the selection differentiable while the
depth and confidence parameters are still settling. The second stage
freezes the blend into an ordinary scalar parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowsfm import diffcore as dc
from flowsfm.errors import DegenerateInputError

__all__ = ["FocalCandidates", "soft_select_focal"]

# Additive logit for excluded (non-finite) candidates; exp of it underflows
# to an exact zero weight without touching the gradient of live lanes.
_EXCLUDED_LOGIT = -1e30


def _default_values() -> np.ndarray:
    return np.linspace(0.5, 2.0, 60)


@dataclass(frozen=True)
class FocalCandidates:
    """Candidate focal grid (width units) and softmin temperature."""

    values: np.ndarray = field(default_factory=_default_values)
    temperature: float = 10.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("FocalCandidates: need a 1-D grid of at least 2 values")
        if not np.all(np.diff(v) > 0) or v[0] <= 0:
            raise ValueError("FocalCandidates: values must be positive and increasing")
        if self.temperature <= 0:
            raise ValueError("FocalCandidates: temperature must be positive")
        object.__setattr__(self, "values", v)

    @property
    def spacing(self) -> float:
        """Largest gap between adjacent candidates."""
        return float(np.max(np.diff(self.values)))


def soft_select_focal(cand_losses: dc.Tensor, values: np.ndarray,
                      temperature: float) -> tuple[dc.Tensor, dc.Tensor]:
    """Blend candidates with weights softmax(-temperature * loss).

    Non-finite candidate losses are excluded with exactly zero weight.
    Returns (scalar focal, per-candidate weights); both stay on the tape.
    """
    if cand_losses.ndim != 1 or cand_losses.shape[0] != values.size:
        raise dc.ShapeError(
            f"soft_select_focal: losses {cand_losses.shape} vs {values.size} candidates")
    finite = np.isfinite(cand_losses.data)
    if not finite.any():
        raise DegenerateInputError("soft_select_focal: every candidate loss is non-finite")
    # Blank excluded lanes before scaling; inf * 0 in the backward pass
    # would otherwise contaminate the tape with nans.
    safe = dc.where(finite, cand_losses, dc.constant(0.0))
    logits = dc.where(finite, safe * (-temperature), dc.constant(_EXCLUDED_LOGIT))
    shifted = logits - float(logits.data[finite].max())
    unnorm = dc.exp(shifted)
    weights = unnorm / unnorm.sum()
    focal = (weights * dc.constant(values)).sum()
    return focal, weights
