"""Point-cloud and image evaluation metrics.

Chamfer distance uses unsquared Euclidean nearest-neighbor distances
(symmetric halves averaged), F-Score counts matches within a threshold t;
both run on a uniform-grid nearest-neighbor index whose answers are exact
(expanding-ring search with a termination bound, brute-force fallback), so
the O(nm) brute force stays available as an independent oracle.

Conventions: the metric space is the unit-sphere-normalized scene, so the
default threshold t = 0.01 means 1% of the object scale; precision is
measured over the reconstruction (second argument), recall over the
reference (first argument).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalConfig:
    n_sample: int = 3000
    threshold: float = 0.01
    n_views: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_sample < 1 or self.threshold <= 0:
            raise ValueError("need n_sample >= 1 and threshold > 0")


class NearestNeighborIndex:
    """Uniform-grid bucketing for exact nearest-neighbor / radius queries.

    Cells have edge `cell_size` (the F-Score threshold is the natural
    choice).  Queries expand over Chebyshev rings of cells and stop once the
    best squared distance cannot be beaten by any unvisited ring; tiny point
    sets short-circuit to brute force.
    """

    BRUTE_FORCE_LIMIT = 64

    def __init__(self, points, cell_size):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.h = float(cell_size)
        self.cells = {}
        keys = np.floor(self.points / self.h).astype(np.int64)
        for idx, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(idx)
        self._key_min = keys.min(axis=0)
        self._key_max = keys.max(axis=0)

    def _ring_bounds(self, base):
        """First ring that can contain cells, and the ring covering the whole box."""
        lo = self._key_min - base
        hi = base - self._key_max
        start = int(max(0, np.maximum(lo, hi).max()))
        last = int(np.maximum(np.abs(self._key_min - base),
                              np.abs(self._key_max - base)).max())
        return start, last

    def _candidates_in_ring(self, base, ring):
        out = []
        if ring == 0:
            got = self.cells.get(base)
            return got or out
        bx, by, bz = base
        r = ring
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if max(abs(dx), abs(dy)) == r:
                    dzs = range(-r, r + 1)
                else:
                    dzs = (-r, r)
                for dz in dzs:
                    got = self.cells.get((bx + dx, by + dy, bz + dz))
                    if got:
                        out.extend(got)
        return out

    def nearest(self, q):
        """(index, distance) of the exact nearest neighbor of q."""
        q = np.asarray(q, dtype=np.float64)
        if self.points.shape[0] <= self.BRUTE_FORCE_LIMIT:
            d2 = np.sum((self.points - q) ** 2, axis=1)
            i = int(np.argmin(d2))
            return i, math.sqrt(d2[i])
        base = np.floor(q / self.h).astype(np.int64)
        start, last = self._ring_bounds(base)
        if start > 8:
            # query far outside the indexed box: ring shells would enumerate
            # more cells than there are points, so scan the points directly
            d2 = np.sum((self.points - q) ** 2, axis=1)
            i = int(np.argmin(d2))
            return i, math.sqrt(d2[i])
        base = tuple(base)
        best_i, best_d2 = -1, math.inf
        for ring in range(start, last + 1):
            # any point in ring r lies at distance >= (r - 1) * h from q
            if best_i >= 0 and best_d2 <= ((ring - 1) * self.h) ** 2:
                break
            cand = self._candidates_in_ring(base, ring)
            if cand:
                pts = self.points[cand]
                d2 = np.sum((pts - q) ** 2, axis=1)
                j = int(np.argmin(d2))
                if d2[j] < best_d2:
                    best_i, best_d2 = cand[j], float(d2[j])
        return best_i, math.sqrt(best_d2)

    def nearest_distances(self, queries):
        return np.array([self.nearest(q)[1] for q in np.asarray(queries).reshape(-1, 3)])

    def has_within(self, q, radius):
        """True iff some indexed point lies within `radius` of q (exact)."""
        q = np.asarray(q, dtype=np.float64)
        if self.points.shape[0] <= self.BRUTE_FORCE_LIMIT:
            return bool(np.any(np.sum((self.points - q) ** 2, axis=1) <= radius * radius))
        base = np.floor(q / self.h).astype(np.int64)
        start, last = self._ring_bounds(base)
        base = tuple(base)
        r2 = radius * radius
        # a ring beyond radius/h + 1 cannot hold a point within the radius
        last = min(last, int(math.ceil(radius / self.h)) + 1)
        for ring in range(start, last + 1):
            cand = self._candidates_in_ring(base, ring)
            if cand and np.any(np.sum((self.points[cand] - q) ** 2, axis=1) <= r2):
                return True
        return False


def brute_force_nearest_distances(queries, points):
    """O(nm) oracle: unsquared distance from each query to its nearest point."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(queries.shape[0])
    for i, q in enumerate(queries):
        out[i] = math.sqrt(np.min(np.sum((points - q) ** 2, axis=1)))
    return out


def chamfer(p1, p2, cell_size=None):
    """Symmetric mean nearest-neighbor distance (unsquared), halves averaged."""
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    if p1.shape[0] == 0 or p2.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    if cell_size is None:
        span = max(np.ptp(np.vstack([p1, p2]), axis=0).max(), 1e-12)
        cell_size = span / 16.0
    d12 = NearestNeighborIndex(p2, cell_size).nearest_distances(p1)
    d21 = NearestNeighborIndex(p1, cell_size).nearest_distances(p2)
    return 0.5 * float(np.mean(d12)) + 0.5 * float(np.mean(d21))


def chamfer_brute_force(p1, p2):
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    if p1.shape[0] == 0 or p2.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return 0.5 * float(np.mean(brute_force_nearest_distances(p1, p2))) + \
        0.5 * float(np.mean(brute_force_nearest_distances(p2, p1)))


def fscore(p1, p2, threshold):
    """(fscore, precision, recall) at distance threshold `threshold`.

    p1 is the reference set, p2 the reconstruction: precision is the
    fraction of p2 within the threshold of p1, recall the fraction of p1
    within the threshold of p2.
    """
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    if p1.shape[0] == 0 or p2.shape[0] == 0:
        raise ValueError("f-score needs two non-empty point sets")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    idx1 = NearestNeighborIndex(p1, threshold)
    idx2 = NearestNeighborIndex(p2, threshold)
    precision = float(np.mean([idx1.has_within(q, threshold) for q in p2]))
    recall = float(np.mean([idx2.has_within(q, threshold) for q in p1]))
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2.0 * precision * recall / (precision + recall), precision, recall


def fscore_brute_force(p1, p2, threshold):
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    precision = float(np.mean(brute_force_nearest_distances(p2, p1) <= threshold))
    recall = float(np.mean(brute_force_nearest_distances(p1, p2) <= threshold))
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2.0 * precision * recall / (precision + recall), precision, recall


def sample_mesh_surface(mesh, n, rng):
    """n points drawn area-proportionally over faces, uniform barycentric."""
    areas = mesh.face_areas()
    total = float(areas.sum())
    if total <= 0 or mesh.is_empty:
        raise ValueError("mesh has no positive-area faces to sample")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def psnr_eval(model, obj, n_views=5, rng=None, render_config=None):
    """Mean PSNR over deterministic renders of a few of the object's poses."""
    from .render import RenderConfig, psnr, render_image
    from dataclasses import replace

    rng = rng or np.random.default_rng(0)
    cfg = render_config or RenderConfig()
    cfg = replace(cfg, stratified_jitter=False)
    tw = model.generate(obj.cloud)
    k = min(n_views, len(obj.views))
    picks = rng.choice(len(obj.views), size=k, replace=False)
    bg = np.asarray(cfg.background, dtype=np.float64)
    values = []
    for vi in picks:
        view = obj.views[vi]
        img, _ = render_image(tw, view.pose, cfg, model.field_config)
        rgba = view.image.astype(np.float64) / 255.0
        target = rgba[..., :3] * rgba[..., 3:4] + (1.0 - rgba[..., 3:4]) * bg
        values.append(psnr(float(np.mean((img - target) ** 2))))
    return float(np.mean(values))
