"""Shared fixtures and finite-difference helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from flowsfm import synthworld
from flowsfm.synthworld import NoiseSpec, SceneSpec


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative disagreement, safe when ``b`` is small."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / (np.abs(b).max() + 1e-12))


@pytest.fixture(scope="session")
def tiny_scene() -> synthworld.Scene:
    """3-frame 16x12 noiseless orbit, shared by forward-pass tests."""
    return synthworld.make_scene(
        SceneSpec(kind="orbit", n_frames=3, width=16, height=12, focal=1.2, seed=5))


@pytest.fixture(scope="session")
def noisy_scene() -> synthworld.Scene:
    """4-frame 24x18 orbit with mild flow noise, for solver tests."""
    return synthworld.make_scene(
        SceneSpec(kind="orbit", n_frames=4, width=24, height=18, focal=1.2, seed=7,
                  noise=NoiseSpec(flow_sigma=0.001)))
