"""Volumetric ellipsoid-based deformable model of the left-ventricle wall.

The model is a stack of ``n_w`` parametric layers over material coordinates
``(u, v, w)``: latitude ``u`` runs from -pi/2 at the apex to pi/6 at the base,
longitude ``v`` covers [-pi, pi) periodically, and ``w`` indexes layers from
the inner (endocardial) to the outer (epicardial) surface. Each layer is an
ellipsoid shaped by an overall scale ``a0(w)`` and per-(u, w) aspect ratios
``a1, a2, a3`` in [0, 1], then modified by a twist about the long axis
``tau(u, w)`` and in-plane centroid offsets ``e_xo, e_yo(u, w)``, and finally
carried into world coordinates by a rigid pose (center ``c``, unit quaternion
``r``). World points are

    m = c + R(r) @ (s + d)

where ``s`` is the twisted/offset ellipsoid point and ``d`` an optional local
per-point displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

U_MIN = -np.pi / 2
U_MAX = np.pi / 6


@dataclass(frozen=True)
class CoordinateGrid:
    """Regular sample lattice over the material coordinates.

    ``u`` is uniform on [U_MIN, U_MAX] inclusive; ``v`` is uniform on
    [-pi, pi) half-open so the seam is not duplicated; ``w`` is the integer
    layer index 0..n_w-1.
    """

    n_u: int
    n_v: int
    n_w: int
    u: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_u < 2 or self.n_v < 3 or self.n_w < 1:
            raise DataError(
                f"grid too small: n_u={self.n_u} n_v={self.n_v} n_w={self.n_w}")
        object.__setattr__(self, "u", np.linspace(U_MIN, U_MAX, self.n_u))
        object.__setattr__(
            self, "v", -np.pi + 2.0 * np.pi * np.arange(self.n_v) / self.n_v)

    @property
    def n_points(self) -> int:
        return self.n_u * self.n_v * self.n_w


@dataclass
class ParameterFunctions:
    """Shape, twist, offset and pose parameters of one model.

    Shapes: ``a0`` is (n_w,); ``a1, a2, a3, tau, e_xo, e_yo`` are
    (n_u, n_w) sampled on the grid's u lattice; ``c`` is (3,) and ``r`` a
    unit quaternion (w, x, y, z).
    """

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    tau: np.ndarray
    e_xo: np.ndarray
    e_yo: np.ndarray
    c: np.ndarray
    r: np.ndarray

    def validate(self):
        a0 = np.asarray(self.a0)
        if a0.ndim != 1 or np.any(a0 <= 0):
            raise DataError("a0 must be a positive 1-d array")
        n_w = a0.shape[0]
        for name in ("a1", "a2", "a3", "tau", "e_xo", "e_yo"):
            arr = np.asarray(getattr(self, name))
            if arr.ndim != 2 or arr.shape[1] != n_w:
                raise DataError(f"{name} must have shape (n_u, {n_w}), got {arr.shape}")
        for name in ("a1", "a2", "a3"):
            arr = np.asarray(getattr(self, name))
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise DataError(f"{name} out of [0, 1]")
        if np.asarray(self.c).shape != (3,):
            raise DataError("c must have shape (3,)")
        r = np.asarray(self.r)
        if r.shape != (4,) or abs(np.linalg.norm(r) - 1.0) > 1e-12:
            raise DataError("r must be a unit quaternion (w, x, y, z)")

    @property
    def n_w(self) -> int:
        return np.asarray(self.a0).shape[0]

    def copy(self) -> "ParameterFunctions":
        return ParameterFunctions(*(np.array(getattr(self, f)) for f in
                                    ("a0", "a1", "a2", "a3", "tau", "e_xo",
                                     "e_yo", "c", "r")))


@dataclass
class MaterialGrid:
    """Evaluated model: world positions for every (u, v, w) lattice point.

    ``points`` has shape (n_u, n_v, n_w, 3). The flattened ordering used
    everywhere downstream is row-major over (u, v, w).
    """

    grid: CoordinateGrid
    points: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.points.reshape(-1, 3)

    def layer(self, w: int) -> np.ndarray:
        return self.points[:, :, w]


def quaternion_to_matrix(r) -> np.ndarray:
    """Rotation matrix of a quaternion given as (w, x, y, z)."""
    r = np.asarray(r, dtype=np.float64)
    qw, qx, qy, qz = r / np.linalg.norm(r)
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])


def eval_ellipsoid(a0, a1, a2, a3, u, v):
    """Base ellipsoid surface point(s) e(u, v) for given shape parameters.

    All arguments broadcast; returns an array with trailing axis 3. At the
    apex (u = -pi/2) the x and y components collapse to zero and z = -a0*a3.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < U_MIN - 1e-12) or np.any(u > U_MAX + 1e-12):
        raise DataError("u outside [-pi/2, pi/6]")
    cu, su = np.cos(u), np.sin(u)
    ex = a0 * a1 * cu * np.cos(v)
    ey = a0 * a2 * cu * np.sin(v)
    ez = a0 * a3 * su
    return np.stack(np.broadcast_arrays(ex, ey, ez), axis=-1)


def apply_twist_offset(e, tau, e_xo, e_yo):
    """Rotate ellipsoid points about z by tau and shift in-plane by offsets.

    ``e`` is (..., 3); ``tau, e_xo, e_yo`` broadcast against its leading
    shape. The map is an isometry in each z-plane up to the offset shift.
    """
    e = np.asarray(e, dtype=np.float64)
    ct, st = np.cos(tau), np.sin(tau)
    x, y, z = e[..., 0], e[..., 1], e[..., 2]
    sx = x * ct - y * st + e_xo
    sy = x * st + y * ct + e_yo
    return np.stack(np.broadcast_arrays(sx, sy, z), axis=-1)


def eval_model(pf: ParameterFunctions, grid: CoordinateGrid,
               local_d: np.ndarray | None = None) -> MaterialGrid:
    """Evaluate the full model on a lattice, with optional local displacements.

    ``local_d``, if given, has shape (n_u, n_v, n_w, 3) and is added in the
    body frame before the rigid pose is applied.
    """
    pf.validate()
    if pf.n_w != grid.n_w:
        raise DataError(f"parameter n_w={pf.n_w} does not match grid n_w={grid.n_w}")
    if np.asarray(pf.a1).shape[0] != grid.n_u:
        raise DataError("parameter u-resolution does not match grid")
    u = grid.u[:, None, None]                      # (n_u, 1, 1)
    v = grid.v[None, :, None]                      # (1, n_v, 1)
    a0 = np.asarray(pf.a0)[None, None, :]          # (1, 1, n_w)
    per_uw = lambda arr: np.asarray(arr)[:, None, :]
    e = eval_ellipsoid(a0, per_uw(pf.a1), per_uw(pf.a2), per_uw(pf.a3), u, v)
    s = apply_twist_offset(e, per_uw(pf.tau), per_uw(pf.e_xo), per_uw(pf.e_yo))
    if local_d is not None:
        local_d = np.asarray(local_d, dtype=np.float64)
        if local_d.shape != s.shape:
            raise DataError(f"local_d shape {local_d.shape} != {s.shape}")
        s = s + local_d
    rot = quaternion_to_matrix(pf.r)
    pts = s @ rot.T + np.asarray(pf.c, dtype=np.float64)
    return MaterialGrid(grid=grid, points=pts)


def interpolate_layers(inner: np.ndarray, outer: np.ndarray,
                       n_w: int) -> np.ndarray:
    """Linear wall interpolation between two boundary surfaces.

    ``inner`` and ``outer`` are (n_u, n_v, 3) surface grids. Returns
    (n_u, n_v, n_w, 3) with layer w at fraction s_w = w / (n_w - 1); the
    endpoint layers reproduce the inputs bit-exactly.
    """
    inner = np.asarray(inner, dtype=np.float64)
    outer = np.asarray(outer, dtype=np.float64)
    if n_w < 2:
        raise DataError("interpolate_layers needs n_w >= 2")
    if inner.shape != outer.shape or inner.ndim != 3 or inner.shape[2] != 3:
        raise DataError("inner/outer must both be (n_u, n_v, 3)")
    s = np.arange(n_w, dtype=np.float64) / (n_w - 1)
    s = s[None, None, :, None]
    return (1.0 - s) * inner[:, :, None, :] + s * outer[:, :, None, :]


@dataclass
class QuadMesh:
    """Quadrilateral surface mesh of one layer.

    ``vertices`` is (n_u * n_v, 3) with vertex (i, j) at index i * n_v + j;
    ``faces`` is (F, 4) of vertex indices, wrapping periodically in v.
    """

    vertices: np.ndarray
    faces: np.ndarray
    layer: int

    def triangles(self) -> np.ndarray:
        """Split each quad along a fixed diagonal into two triangles."""
        q = self.faces
        return np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]], axis=0)


def build_layer_mesh(mg: MaterialGrid, w: int) -> QuadMesh:
    """Quad mesh over one layer of an evaluated grid.

    Faces connect u-adjacent rings and wrap in v. The apex ring vertices are
    geometrically coincident (the surface collapses there), so apex quads are
    degenerate; mesh consumers deal with that via position-based adjacency.
    """
    if not 0 <= w < mg.grid.n_w:
        raise DataError(f"layer {w} out of range 0..{mg.grid.n_w - 1}")
    n_u, n_v = mg.grid.n_u, mg.grid.n_v
    verts = mg.points[:, :, w].reshape(-1, 3).copy()
    i, j = np.meshgrid(np.arange(n_u - 1), np.arange(n_v), indexing="ij")
    jn = (j + 1) % n_v
    faces = np.stack([i * n_v + j, (i + 1) * n_v + j,
                      (i + 1) * n_v + jn, i * n_v + jn], axis=-1)
    return QuadMesh(vertices=verts, faces=faces.reshape(-1, 4), layer=w)


# ---------------------------------------------------------------------------
# lattice index helpers shared by the flow regularizers and the network


def flat_index(n_v: int, n_w: int, u, v, w):
    """Flat row index of lattice point (u, v, w) in the (u, v, w)-major order."""
    return (np.asarray(u) * n_v + np.asarray(v)) * n_w + np.asarray(w)


def ring_index_map(n_u: int, n_v: int, n_w: int) -> np.ndarray:
    """Per-point id of its (u, w) ring; rings are numbered u * n_w + w."""
    u, _, w = np.meshgrid(np.arange(n_u), np.arange(n_v), np.arange(n_w),
                          indexing="ij")
    return (u * n_w + w).reshape(-1)

def grid_edge_pairs(n_u: int, n_v: int, n_w: int) -> np.ndarray:
    """Forward-difference edge list of the lattice as (E, 2) flat index pairs.

    u and w use open forward differences; v wraps periodically.
    """
    u, v, w = np.meshgrid(np.arange(n_u), np.arange(n_v), np.arange(n_w),
                          indexing="ij")
    pairs = []
    # u-direction
    a = flat_index(n_v, n_w, u[:-1], v[:-1], w[:-1]).reshape(-1)
    b = flat_index(n_v, n_w, u[:-1] + 1, v[:-1], w[:-1]).reshape(-1)
    pairs.append(np.stack([a, b], axis=1))
    # v-direction, periodic
    a = flat_index(n_v, n_w, u, v, w).reshape(-1)
    b = flat_index(n_v, n_w, u, (v + 1) % n_v, w).reshape(-1)
    pairs.append(np.stack([a, b], axis=1))
    if n_w > 1:
        a = flat_index(n_v, n_w, u[:, :, :-1], v[:, :, :-1], w[:, :, :-1]).reshape(-1)
        b = flat_index(n_v, n_w, u[:, :, :-1], v[:, :, :-1], w[:, :, :-1] + 1).reshape(-1)
        pairs.append(np.stack([a, b], axis=1))
    return np.concatenate(pairs, axis=0)


def even_layer_indices(n_w: int) -> np.ndarray:
    """Material layers carried by the recovery network: every second layer."""
    return np.arange(0, n_w, 2)


def odd_layer_indices(n_w: int) -> np.ndarray:
    """Intermediate layers used only for datapoint extraction."""
    return np.arange(1, n_w, 2)
