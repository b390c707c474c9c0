"""Triangle-pair and mesh self-intersection tests.

The predicate is strict-interior with a contact tolerance: two triangles
intersect only if they penetrate each other's plane by more than ``eps`` and
the resulting crossing segments overlap. Touching contacts, shared edges,
and (near-)coplanar configurations all count as non-intersecting. That
convention keeps densely sampled surfaces with collapsed rings (for example
an apex where a whole ring of vertices coincides) from reporting spurious
hits, while transversal fold-through of a deformed surface is still caught.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def triangle_normal(tri: np.ndarray) -> np.ndarray:
    return np.cross(tri[1] - tri[0], tri[2] - tri[0])


def is_degenerate(tri: np.ndarray, eps_area: float = 1e-12) -> bool:
    """True when the triangle's area is below ``eps_area`` (half the normal
    magnitude), so no reliable plane exists."""
    return 0.5 * np.linalg.norm(triangle_normal(tri)) < eps_area


def _crossing_interval(proj, dist):
    """Projected interval where a triangle crosses the other's plane.

    ``proj`` are the three vertex projections on the intersection line,
    ``dist`` their signed plane distances (mixed signs guaranteed).
    """
    pts = []
    for i in range(3):
        for j in range(i + 1, 3):
            if dist[i] * dist[j] < 0.0:
                t = dist[i] / (dist[i] - dist[j])
                pts.append(proj[i] + t * (proj[j] - proj[i]))
    return min(pts), max(pts)


def tri_tri_intersect(tri_a: np.ndarray, tri_b: np.ndarray,
                      eps: float = 1e-9) -> bool:
    """Strict-interior intersection of two triangles.

    Returns True only when each triangle has vertices strictly on both sides
    of the other's plane (beyond ``eps``) and the two crossing segments on
    the common line overlap by more than ``eps``. Degenerate triangles never
    intersect.
    """
    a = np.asarray(tri_a, dtype=np.float64)
    b = np.asarray(tri_b, dtype=np.float64)
    if a.shape != (3, 3) or b.shape != (3, 3):
        raise DataError("triangles must be (3, 3) vertex arrays")
    n_a = triangle_normal(a)
    n_b = triangle_normal(b)
    len_a, len_b = np.linalg.norm(n_a), np.linalg.norm(n_b)
    if len_a < 1e-12 or len_b < 1e-12:
        return False
    n_a = n_a / len_a
    n_b = n_b / len_b

    dist_a = (a - b[0]) @ n_b        # T_a vertices vs T_b plane
    if dist_a.max() <= eps or dist_a.min() >= -eps:
        return False
    dist_b = (b - a[0]) @ n_a
    if dist_b.max() <= eps or dist_b.min() >= -eps:
        return False

    d = np.cross(n_a, n_b)
    if np.linalg.norm(d) < 1e-12:
        return False
    axis = int(np.argmax(np.abs(d)))
    lo_a, hi_a = _crossing_interval(a[:, axis], dist_a)
    lo_b, hi_b = _crossing_interval(b[:, axis], dist_b)
    return min(hi_a, hi_b) - max(lo_a, lo_b) > eps


@dataclass
class SelfIntersectionReport:
    """Outcome of a mesh self-intersection scan."""

    n_triangles: int
    intersecting: np.ndarray     # (F,) bool, triangle takes part in a crossing
    degenerate: np.ndarray       # (F,) bool, area below threshold
    pairs: list                  # [(i, j), ...] intersecting triangle pairs
    n_candidates: int            # pairs that survived the box prefilter

    @property
    def ratio(self) -> float:
        """Fraction of triangles involved in at least one intersection."""
        if self.n_triangles == 0:
            return 0.0
        return float(self.intersecting.sum()) / self.n_triangles


def mesh_self_intersections(vertices: np.ndarray, faces: np.ndarray,
                            eps: float = 1e-9) -> SelfIntersectionReport:
    """Scan a triangle mesh for pairwise self-intersections.

    Pairs sharing any vertex index are skipped (neighbors legitimately
    touch). An axis-aligned box sweep prunes far-apart pairs before the
    exact test. Degenerate triangles are flagged and treated as
    non-intersecting.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise DataError(f"vertices must be (N, 3), got {verts.shape}")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise DataError(f"faces must be (F, 3), got {tris.shape}")
    if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
        raise DataError("face index out of range")

    n_f = tris.shape[0]
    corners = verts[tris]                       # (F, 3, 3)
    degenerate = np.array([is_degenerate(c) for c in corners]) \
        if n_f else np.zeros(0, dtype=bool)
    lo = corners.min(axis=1) - eps if n_f else np.zeros((0, 3))
    hi = corners.max(axis=1) + eps if n_f else np.zeros((0, 3))

    order = np.argsort(lo[:, 0], kind="stable") if n_f else np.zeros(0, int)
    intersecting = np.zeros(n_f, dtype=bool)
    pairs = []
    n_candidates = 0
    for oi in range(n_f):
        i = order[oi]
        if degenerate[i]:
            continue
        for oj in range(oi + 1, n_f):
            j = order[oj]
            if lo[j, 0] > hi[i, 0]:
                break
            if degenerate[j]:
                continue
            if lo[j, 1] > hi[i, 1] or lo[i, 1] > hi[j, 1]:
                continue
            if lo[j, 2] > hi[i, 2] or lo[i, 2] > hi[j, 2]:
                continue
            if set(tris[i]) & set(tris[j]):
                continue
            n_candidates += 1
            if tri_tri_intersect(corners[i], corners[j], eps):
                intersecting[i] = True
                intersecting[j] = True
                pairs.append((int(min(i, j)), int(max(i, j))))
    pairs.sort()
    return SelfIntersectionReport(n_triangles=n_f, intersecting=intersecting,
                                  degenerate=degenerate, pairs=pairs,
                                  n_candidates=n_candidates)
