"""flowsfm: gradient-based structure from motion on precomputed correspondences.

Recovers per-frame camera poses, a shared pinhole focal length, and dense
per-frame depth from dense optical flow plus sparse point tracks, by
first-order minimization of a camera-induced flow loss. Poses are solved
in closed form from depth via weighted Procrustes alignment; the focal
length starts as a softmin blend over a candidate sweep and later becomes
a free variable. Everything differentiable runs on the small numpy tape
in :mod:`flowsfm.diffcore`.
"""

__version__ = "0.1.0"
