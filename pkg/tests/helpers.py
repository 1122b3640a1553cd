"""Shared fixtures for the test modules."""

from itertools import combinations

import numpy as np


def random_scene(seed, n=8, size=8.0):
    rng = np.random.default_rng(seed)
    while True:
        pts = rng.uniform(0, size, (n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        # keep every triple well away from collinear so the exact oracle is well conditioned
        if d.min() > 0.5 and _min_triangle_height(pts) > 0.05:
            return pts


def _min_triangle_height(pts):
    best = np.inf
    for a, b, c in combinations(range(len(pts)), 3):
        ab, ac = pts[b] - pts[a], pts[c] - pts[a]
        area = abs(ab[0] * ac[1] - ab[1] * ac[0])
        best = min(best, area / max(np.linalg.norm(ab), np.linalg.norm(ac), np.linalg.norm(pts[c] - pts[b])))
    return best
