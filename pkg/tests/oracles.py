"""Independent reference computations used by the tests."""
from __future__ import annotations

import itertools

import numpy as np

from seqdet3d.geometry import Box3D, bev_footprint, points_in_box_mask


def mc_iou_3d(a: Box3D, b: Box3D, n: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo 3D IoU from uniform samples in the joint bounding box."""
    rng = np.random.default_rng(seed)
    fp = np.vstack([bev_footprint(a), bev_footprint(b)])
    lo = np.array([fp[:, 0].min(), fp[:, 1].min(), min(a.z - a.h / 2, b.z - b.h / 2)])
    hi = np.array([fp[:, 0].max(), fp[:, 1].max(), max(a.z + a.h / 2, b.z + b.h / 2)])
    pts = lo + (hi - lo) * rng.random((n, 3))
    ia = points_in_box_mask(pts, a)
    ib = points_in_box_mask(pts, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def mc_polygon_overlap(p: np.ndarray, q: np.ndarray, n: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo area of the intersection of two convex CCW polygons."""
    rng = np.random.default_rng(seed)
    allv = np.vstack([p, q])
    lo, hi = allv.min(axis=0), allv.max(axis=0)
    pts = lo + (hi - lo) * rng.random((n, 2))

    def inside(poly):
        m = np.ones(n, dtype=bool)
        for i in range(len(poly)):
            a, b = poly[i], poly[(i + 1) % len(poly)]
            m &= (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]) >= 0
        return m

    return np.count_nonzero(inside(p) & inside(q)) / n * float(np.prod(hi - lo))


def max_matching(dist: np.ndarray, threshold: float) -> int:
    """Largest one-to-one matching under the threshold, by exhaustive search."""
    n_p, n_g = dist.shape
    best = 0
    if n_p == 0 or n_g == 0:
        return 0
    small, large = (n_p, n_g) if n_p <= n_g else (n_g, n_p)
    d = dist if n_p <= n_g else dist.T
    for perm in itertools.permutations(range(large), small):
        best = max(best, sum(1 for i, j in enumerate(perm) if d[i, j] < threshold))
    return best
