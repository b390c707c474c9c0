"""Synthetic left-ventricle cohort: shapes, cycles, planes, and datapoints.

A subject is built in four steps. Randomized end-diastole (ED) and
end-systole (ES) parameter sets (plus smooth local bump fields) define the
inner and outer wall surfaces; a two-layer fit can recover such parameters
from sparse point clouds when only geometry is given. The full wall volume is
interpolated between the fitted boundary layers, ES receives a torsion
profile, and intermediate frames are blended per axis with fixed temporal
scalars. Finally the moving wall is clipped against fixed short-axis (SAX,
constant z) and long-axis (LAX, containing the z-axis) imaging planes, which
produces tagged datapoints with stable correspondence keys.

Material motion between two frames is visible to downstream consumers only
through these clipped datapoint pairs, which mimics what tagged MR imaging
actually measures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import (CoordinateGrid, MaterialGrid, ParameterFunctions,
                       build_layer_mesh, eval_model, interpolate_layers,
                       odd_layer_indices, even_layer_indices)
from .network import ApparentMotionCues, farthest_point_sample
from .training import adam_step, msl_schedule

# Per-axis temporal blend schedules over the cardiac cycle. Index 0 is ED,
# the all-ones index is ES; the remaining values trace systolic contraction
# and diastolic relaxation per axis.
_SCALARS_T20 = {
    "x": [0.000, 0.090, 0.150, 0.350, 0.550, 0.750, 1.000, 0.920, 0.780,
          0.650, 0.580, 0.540, 0.410, 0.370, 0.240, 0.210, 0.180, 0.160,
          0.120, 0.080],
    "y": [0.000, 0.080, 0.180, 0.380, 0.580, 0.780, 1.000, 0.980, 0.740,
          0.620, 0.550, 0.520, 0.480, 0.350, 0.220, 0.190, 0.180, 0.160,
          0.110, 0.080],
    "z": [0.000, 0.100, 0.200, 0.400, 0.600, 0.800, 1.000, 0.920, 0.880,
          0.650, 0.380, 0.335, 0.325, 0.315, 0.3000, 0.290, 0.280, 0.220,
          0.090, 0.070],
}
# Desk-scale cycle: the T=20 schedule subsampled to 8 frames (ES at index 3).
_T8_PICK = [0, 2, 4, 6, 9, 12, 15, 18]


def temporal_scalars(t_frames: int):
    """Blend schedules (s_x, s_y, s_z) and the ES index for a cycle length."""
    if t_frames == 20:
        sx, sy, sz = (np.array(_SCALARS_T20[a]) for a in "xyz")
    elif t_frames == 8:
        sx, sy, sz = (np.array(_SCALARS_T20[a])[_T8_PICK] for a in "xyz")
    else:
        raise ConfigError(
            f"no temporal schedule for t_frames={t_frames}; supported: 8, 20")
    return sx, sy, sz, int(np.argmax(sx))


# ---------------------------------------------------------------------------
# imaging planes and clipping

VIEW_SAX, VIEW_LAX = 0, 1
LINE_LON, LINE_LAT = 0, 1   # longitude: varying u; latitude: varying v


@dataclass(frozen=True)
class ImagingPlane:
    """A fixed acquisition plane: SAX at constant z, or LAX containing the
    z-axis at a given azimuth."""

    plane_id: int
    view: str                  # 'sax' | 'lax'
    z_offset: float = 0.0
    azimuth: float = 0.0

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.view == "sax":
            return p[..., 2] - self.z_offset
        n_x, n_y = -np.sin(self.azimuth), np.cos(self.azimuth)
        return n_x * p[..., 0] + n_y * p[..., 1]


def default_planes(mg_ed: MaterialGrid, n_sax: int, n_lax: int) -> list:
    """Plane set spanning the ED geometry: SAX offsets at interior fractions
    of the z extent, LAX azimuths uniform over half a turn."""
    if n_sax < 1 or n_lax < 1:
        raise ConfigError("need at least one plane per view")
    z = mg_ed.points[..., 2]
    z_min, z_max = float(z.min()), float(z.max())
    planes = []
    for i in range(n_sax):
        frac = (i + 1) / (n_sax + 1)
        planes.append(ImagingPlane(plane_id=i, view="sax",
                                   z_offset=z_min + frac * (z_max - z_min)))
    for j in range(n_lax):
        planes.append(ImagingPlane(plane_id=n_sax + j, view="lax",
                                   azimuth=j * np.pi / n_lax))
    return planes


def clip_plane(mg: MaterialGrid, plane: ImagingPlane, layers) -> dict:
    """Plane crossings of the grid's coordinate lines, keyed for tracking.

    SAX planes are walked along longitude lines (fixed v and w, u varying);
    LAX planes along periodic latitude rings (fixed u and w, v varying).
    Each sign change of the signed distance yields one linearly interpolated
    point under key ``(plane_id, w, line_type, line_index, ordinal)``. A zero
    distance counts as the positive side, so touching points emit once.

    Latitude ordinals are assigned by crossing direction first (entering the
    positive side before leaving it) and segment index second, which keeps
    keys stable when twist rotates the crossing pattern around the seam.
    """
    layers = list(layers)
    if not layers:
        raise DataError("clip_plane needs a non-empty layer set")
    out = {}
    if plane.view == "sax":
        for w in layers:
            pts = mg.points[:, :, w]                  # (n_u, n_v, 3)
            d = plane.signed_distance(pts)
            pos_side = d >= 0.0
            for j in range(mg.grid.n_v):
                ordinal = 0
                for i in range(mg.grid.n_u - 1):
                    if pos_side[i, j] == pos_side[i + 1, j]:
                        continue
                    t = d[i, j] / (d[i, j] - d[i + 1, j])
                    p = pts[i, j] + t * (pts[i + 1, j] - pts[i, j])
                    out[(plane.plane_id, w, LINE_LON, j, ordinal)] = p
                    ordinal += 1
    else:
        for w in layers:
            pts = mg.points[:, :, w]
            d = plane.signed_distance(pts)
            pos_side = d >= 0.0
            n_v = mg.grid.n_v
            for i in range(mg.grid.n_u):
                crossings = []
                for j in range(n_v):
                    jn = (j + 1) % n_v
                    if pos_side[i, j] == pos_side[i, jn]:
                        continue
                    entering = pos_side[i, jn]
                    t = d[i, j] / (d[i, j] - d[i, jn])
                    p = pts[i, j] + t * (pts[i, jn] - pts[i, j])
                    crossings.append((0 if entering else 1, j, p))
                crossings.sort(key=lambda c: (c[0], c[1]))
                for ordinal, (_, _, p) in enumerate(crossings):
                    out[(plane.plane_id, w, LINE_LAT, i, ordinal)] = p
    return out


# ---------------------------------------------------------------------------
# sequences


@dataclass
class MotionSequence:
    """A cardiac cycle: T frames of one material lattice, plus cycle labels."""

    frames: np.ndarray          # (T, n_u, n_v, n_w, 3)
    es_index: int
    subject_id: str = ""
    norm_meta: object = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 5 or f.shape[4] != 3:
            raise DataError(f"frames must be (T, n_u, n_v, n_w, 3), got {f.shape}")
        if not 0 <= self.es_index < f.shape[0]:
            raise DataError(f"es_index {self.es_index} outside 0..{f.shape[0] - 1}")
        self.frames = f

    @property
    def t_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> tuple:
        return self.frames.shape[1:4]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.t_frames)

    def grid(self) -> CoordinateGrid:
        n_u, n_v, n_w = self.dims
        return CoordinateGrid(n_u, n_v, n_w)

    def frame_grid(self, t: int) -> MaterialGrid:
        return MaterialGrid(grid=self.grid(), points=self.frames[t])

    def even_layers(self) -> "MotionSequence":
        """Sub-sequence over the material layers used for recovery."""
        keep = even_layer_indices(self.dims[2])
        return MotionSequence(frames=self.frames[:, :, :, keep],
                              es_index=self.es_index,
                              subject_id=self.subject_id,
                              norm_meta=self.norm_meta)

    def material_points(self, t: int) -> np.ndarray:
        return self.frames[t].reshape(-1, 3)


def synthesize_cycle(ed: MaterialGrid, es: MaterialGrid,
                     scalars: tuple, subject_id: str = "") -> MotionSequence:
    """Blend ED and ES grids into a full cycle, one schedule per axis.

    ``scalars`` is (s_x, s_y, s_z), each of length T with value 0 at frame 0
    and 1 at the ES frame. Per axis, frame q is
    ``s(q) * ES + (1 - s(q)) * ED``, which reproduces ED and ES bit-exactly
    at the endpoints.
    """
    s_x, s_y, s_z = (np.asarray(s, dtype=np.float64) for s in scalars)
    t_frames = s_x.shape[0]
    if s_y.shape[0] != t_frames or s_z.shape[0] != t_frames:
        raise DataError("temporal scalar arrays must share one length")
    if ed.points.shape != es.points.shape:
        raise DataError("ED and ES grids must share dims")
    if s_x[0] != 0.0 or s_y[0] != 0.0 or s_z[0] != 0.0:
        raise DataError("temporal scalars must start at 0 (ED)")
    es_hits = (s_x == 1.0) & (s_y == 1.0) & (s_z == 1.0)
    if not es_hits.any():
        raise DataError("temporal scalars never reach 1 on all axes (no ES frame)")
    es_index = int(np.argmax(es_hits))
    frames = np.empty((t_frames,) + ed.points.shape, dtype=np.float64)
    for axis, s in enumerate((s_x, s_y, s_z)):
        sb = s[:, None, None, None]
        frames[..., axis] = sb * es.points[..., axis] \
            + (1.0 - sb) * ed.points[..., axis]
    return MotionSequence(frames=frames, es_index=es_index,
                          subject_id=subject_id)


@dataclass
class SpammSequence:
    """Tracked datapoints over a cycle, in scanner coordinates (mm).

    Rows are sorted by correspondence key. ``presence[r, t]`` says whether
    key r produced a crossing at frame t; ``pos[r, t]`` is its position then
    (zeros where absent). A key is active for pair (q, q+1) iff present at
    both frames.
    """

    plane_id: np.ndarray       # (R,)
    view: np.ndarray           # (R,) VIEW_SAX | VIEW_LAX
    w: np.ndarray              # (R,)
    line_type: np.ndarray      # (R,) LINE_LON | LINE_LAT
    line_index: np.ndarray     # (R,)
    ordinal: np.ndarray        # (R,)
    presence: np.ndarray       # (R, T) bool
    pos: np.ndarray            # (R, T, 3)
    planes: list
    _cue_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_records(self) -> int:
        return self.plane_id.shape[0]

    @property
    def t_frames(self) -> int:
        return self.presence.shape[1]

    def key_tuples(self) -> list:
        return list(zip(self.plane_id.tolist(), self.w.tolist(),
                        self.line_type.tolist(), self.line_index.tolist(),
                        self.ordinal.tolist()))

    def active_mask(self, q: int) -> np.ndarray:
        if not 0 <= q < self.t_frames - 1:
            raise DataError(f"pair index {q} outside 0..{self.t_frames - 2}")
        return self.presence[:, q] & self.presence[:, q + 1]

    def cue_indices(self, q: int, n_s: int) -> np.ndarray:
        """Row indices of the FPS-selected active pairs for transition q.

        Selection runs on the stored mm positions at frame q, seeded from the
        lowest key; the result is returned in key order and cached.
        """
        cached = self._cue_cache.get((q, n_s))
        if cached is not None:
            return cached
        act = np.nonzero(self.active_mask(q))[0]
        if n_s > act.shape[0]:
            raise DataError(
                f"transition ({q}, {q + 1}) has {act.shape[0]} active pairs, "
                f"fewer than N_s={n_s}")
        picked = farthest_point_sample(self.pos[act, q], n_s, start=0)
        sel = act[np.sort(picked)]
        self._cue_cache[(q, n_s)] = sel
        return sel

    def cues(self, q: int, n_s: int) -> ApparentMotionCues:
        """Paired cue arrays for one transition, split by view, in mm."""
        sel = self.cue_indices(q, n_s)
        sax = sel[self.view[sel] == VIEW_SAX]
        lax = sel[self.view[sel] == VIEW_LAX]
        return ApparentMotionCues(
            sax_q=self.pos[sax, q].copy(), sax_q1=self.pos[sax, q + 1].copy(),
            lax_q=self.pos[lax, q].copy(), lax_q1=self.pos[lax, q + 1].copy())


def compute_spamm_sequence(seq: MotionSequence, planes, layers=None,
                           n_s: int | None = None) -> SpammSequence:
    """Clip every frame against every plane and assemble tracked records.

    ``layers`` defaults to the odd (non-material) layers. When ``n_s`` is
    given, the per-transition FPS selections are computed eagerly so that an
    undersupplied transition fails here, naming the pair.
    """
    if layers is None:
        layers = odd_layer_indices(seq.dims[2]).tolist()
    records = {}
    t_frames = seq.t_frames
    for t in range(t_frames):
        mg = seq.frame_grid(t)
        for plane in planes:
            for key, p in clip_plane(mg, plane, layers).items():
                slot = records.setdefault(
                    key, (np.zeros(t_frames, dtype=bool),
                          np.zeros((t_frames, 3))))
                slot[0][t] = True
                slot[1][t] = p
    keys = sorted(records.keys())
    view_of = {pl.plane_id: (VIEW_SAX if pl.view == "sax" else VIEW_LAX)
               for pl in planes}
    arr = lambda i: np.array([k[i] for k in keys], dtype=np.int64)
    spamm = SpammSequence(
        plane_id=arr(0), view=np.array([view_of[k[0]] for k in keys],
                                       dtype=np.int64),
        w=arr(1), line_type=arr(2), line_index=arr(3), ordinal=arr(4),
        presence=np.stack([records[k][0] for k in keys])
        if keys else np.zeros((0, t_frames), dtype=bool),
        pos=np.stack([records[k][1] for k in keys])
        if keys else np.zeros((0, t_frames, 3)),
        planes=list(planes))
    if n_s is not None:
        for q in range(t_frames - 1):
            spamm.cue_indices(q, n_s)
    return spamm


# ---------------------------------------------------------------------------
# subjects


@dataclass
class SubjectCloud:
    """Sparse boundary point clouds for both phases (mm)."""

    ed_inner: np.ndarray
    ed_outer: np.ndarray
    es_inner: np.ndarray
    es_outer: np.ndarray
    subject_id: str
    seed: int


@dataclass
class Subject:
    """A generated subject: clouds plus the hidden ground truth behind them."""

    subject_id: str
    seed: int
    cloud: SubjectCloud
    truth_ed: ParameterFunctions    # two-layer (inner, outer)
    truth_es: ParameterFunctions
    bumps_ed: np.ndarray            # (n_u, n_v, 2, 3) local surface offsets, mm
    bumps_es: np.ndarray


def default_shape_ranges() -> dict:
    """Sampling ranges (mm / unitless / radians) for subject generation."""
    return {
        "a0_inner": (38.0, 46.0),
        "wall_a0": (8.0, 13.0),          # added to a0_inner for the outer layer
        "a1": (0.55, 0.72),
        "a2_jitter": (0.92, 1.08),       # a2 = a1 * jitter
        "a3": (0.85, 0.95),
        "radial_contraction": (0.78, 0.86),   # ES multiplier on inner a1, a2
        "wall_thickening": (0.05, 0.10),      # outer contracts less by this
        "shorten_mm": (3.0, 5.0),        # absolute long-axis shortening at ES
        "offset_mm": 0.6,                # max in-plane centroid offset at base
        "bump_xy_mm": (0.35, 0.7),       # (ED, ES) bump amplitude per harmonic
        "bump_z_mm": (0.2, 0.35),
        "twist_apex": 0.21,              # ES torsion profile endpoints, radians
        "twist_base": -0.09,
    }


def set_es_twist(pf: ParameterFunctions, profile: np.ndarray | None = None,
                 apex: float = 0.21, base: float = -0.09) -> ParameterFunctions:
    """Return a copy of ``pf`` with the ES torsion profile installed.

    The default profile is linear in u from ``apex`` at u=-pi/2 to ``base``
    at the basal end, constant across layers. These endpoint values are a
    configurable stand-in for measured normal-subject torsion.
    """
    out = pf.copy()
    n_u, n_w = np.asarray(out.tau).shape
    if profile is None:
        frac = np.arange(n_u) / (n_u - 1)
        profile = apex + (base - apex) * frac
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape != (n_u,):
        raise DataError(f"twist profile must have shape ({n_u},)")
    out.tau = np.repeat(profile[:, None], n_w, axis=1)
    return out


def _sample_bumps(rng, n_u: int, n_v: int, amp_xy: float, amp_z: float):
    """Smooth random surface offsets, zero at both u ends.

    Two circumferential harmonics per axis per layer, shaped by sin(pi * u~)
    so bumps vanish at the apex (protecting its pinning) and at the base.
    """
    u_frac = np.linspace(0.0, 1.0, n_u)
    g = np.sin(np.pi * u_frac)[:, None]
    v = 2.0 * np.pi * np.arange(n_v) / n_v
    bumps = np.zeros((n_u, n_v, 2, 3))
    for layer in range(2):
        for axis, amp in enumerate((amp_xy, amp_xy, amp_z)):
            fld = np.zeros((n_u, n_v))
            for _ in range(2):
                n_h = rng.integers(1, 4)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                fld += rng.uniform(-amp, amp) * np.cos(n_h * v + phase)[None, :]
            bumps[:, :, layer, axis] = fld * g
    return bumps


def generate_subject(seed: int, shape_ranges: dict | None = None,
                     n_u: int = 16, n_v: int = 16,
                     noise_mm: float = 0.3,
                     n_cloud: int | None = 220) -> Subject:
    """Sample one subject: hidden two-layer ED/ES parameters, bump fields,
    and noisy sparse clouds of both boundary surfaces. Deterministic per seed.
    """
    r = dict(default_shape_ranges())
    if shape_ranges:
        r.update(shape_ranges)
    for key in ("a1", "a3", "radial_contraction"):
        lo, hi = r[key]
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"range {key}={r[key]} leaves [0, 1]")
    if r["a0_inner"][0] <= 0:
        raise ConfigError("a0_inner must be positive")

    rng = np.random.default_rng(seed)
    a0_in = rng.uniform(*r["a0_inner"])
    a0_out = a0_in + rng.uniform(*r["wall_a0"])
    a1_in = rng.uniform(*r["a1"])
    a1_out = min(a1_in * rng.uniform(0.97, 1.05), 1.0)
    a2_in = min(a1_in * rng.uniform(*r["a2_jitter"]), 1.0)
    a2_out = min(a2_in * rng.uniform(0.97, 1.05), 1.0)
    a3_in = rng.uniform(*r["a3"])
    a3_out = min(a3_in * rng.uniform(0.98, 1.06), 1.0)

    contract = rng.uniform(*r["radial_contraction"])
    thicken = rng.uniform(*r["wall_thickening"])
    shorten = rng.uniform(*r["shorten_mm"])

    # in-plane centroid offsets: one smooth profile, zero at the apex,
    # shared by both layers and both phases (offsets are anatomy, not motion)
    u = np.linspace(-np.pi / 2, np.pi / 6, n_u)
    taper = (1.0 + np.sin(u)) / 1.5
    off_x = rng.uniform(-r["offset_mm"], r["offset_mm"]) * taper
    off_y = rng.uniform(-r["offset_mm"], r["offset_mm"]) * taper
    e_xo = np.repeat(off_x[:, None], 2, axis=1)
    e_yo = np.repeat(off_y[:, None], 2, axis=1)

    col = lambda a, b: np.column_stack([np.full(n_u, a), np.full(n_u, b)])
    pf_ed = ParameterFunctions(
        a0=np.array([a0_in, a0_out]),
        a1=col(a1_in, a1_out), a2=col(a2_in, a2_out), a3=col(a3_in, a3_out),
        tau=np.zeros((n_u, 2)), e_xo=e_xo, e_yo=e_yo,
        c=np.zeros(3), r=np.array([1.0, 0.0, 0.0, 0.0]))

    # ES: radial contraction (inner more than outer), absolute long-axis
    # shortening shared by both layers, centroid dropped so the apex is pinned
    a3_es_in = a3_in - shorten / a0_in
    a3_es_out = a3_out - shorten / a0_out
    if a3_es_in <= 0 or a3_es_out <= 0:
        raise ConfigError("shorten_mm too large for sampled a0*a3")
    pf_es = ParameterFunctions(
        a0=np.array([a0_in, a0_out]),
        a1=col(a1_in * contract, a1_out * (contract + thicken)),
        a2=col(a2_in * contract, a2_out * (contract + thicken)),
        a3=col(a3_es_in, a3_es_out),
        tau=np.zeros((n_u, 2)), e_xo=e_xo.copy(), e_yo=e_yo.copy(),
        c=np.array([0.0, 0.0, -shorten]), r=np.array([1.0, 0.0, 0.0, 0.0]))
    pf_es = set_es_twist(pf_es, apex=r["twist_apex"], base=r["twist_base"])

    bumps_ed = _sample_bumps(rng, n_u, n_v, r["bump_xy_mm"][0], r["bump_z_mm"][0])
    bumps_es = _sample_bumps(rng, n_u, n_v, r["bump_xy_mm"][1], r["bump_z_mm"][1])

    subject_id = f"subj{seed:05d}"
    grid2 = CoordinateGrid(n_u, n_v, 2)
    clouds = {}
    for phase, pf, bumps in (("ed", pf_ed, bumps_ed), ("es", pf_es, bumps_es)):
        mg = eval_model(pf, grid2, local_d=bumps)
        for layer, name in ((0, "inner"), (1, "outer")):
            pts = mg.points[:, :, layer].reshape(-1, 3)
            if n_cloud is not None and n_cloud < pts.shape[0]:
                pick = rng.choice(pts.shape[0], size=n_cloud, replace=False)
                pts = pts[np.sort(pick)]
            pts = pts + rng.normal(0.0, noise_mm, size=pts.shape) \
                if noise_mm > 0 else pts.copy()
            clouds[f"{phase}_{name}"] = pts
    cloud = SubjectCloud(subject_id=subject_id, seed=seed, **clouds)
    return Subject(subject_id=subject_id, seed=seed, cloud=cloud,
                   truth_ed=pf_ed, truth_es=pf_es,
                   bumps_ed=bumps_ed, bumps_es=bumps_es)


def boundary_grids(subject: Subject, phase: str) -> tuple:
    """Bumped inner and outer surface grids of one phase, (n_u, n_v, 3) each."""
    pf = subject.truth_ed if phase == "ed" else subject.truth_es
    bumps = subject.bumps_ed if phase == "ed" else subject.bumps_es
    n_u, n_v = bumps.shape[:2]
    mg = eval_model(pf, CoordinateGrid(n_u, n_v, 2), local_d=bumps)
    return mg.points[:, :, 0], mg.points[:, :, 1]


def build_sequence(subject: Subject, n_w: int, t_frames: int) -> MotionSequence:
    """Full-wall motion sequence of a subject from its ground-truth phases."""
    sx, sy, sz, _ = temporal_scalars(t_frames)
    grids = {}
    for phase in ("ed", "es"):
        inner, outer = boundary_grids(subject, phase)
        wall = interpolate_layers(inner, outer, n_w)
        n_u, n_v = inner.shape[:2]
        grids[phase] = MaterialGrid(grid=CoordinateGrid(n_u, n_v, n_w),
                                    points=wall)
    return synthesize_cycle(grids["ed"], grids["es"], (sx, sy, sz),
                            subject_id=subject.subject_id)


def sequence_from_params(pf_ed: ParameterFunctions, pf_es: ParameterFunctions,
                         n_v: int, n_w: int, t_frames: int,
                         subject_id: str = "") -> MotionSequence:
    """Motion sequence from fitted two-layer phase parameters (no bumps):
    boundary layers evaluated, wall interpolated, cycle blended."""
    sx, sy, sz, _ = temporal_scalars(t_frames)
    grids = {}
    for phase, pf in (("ed", pf_ed), ("es", pf_es)):
        n_u = np.asarray(pf.a1).shape[0]
        mg2 = eval_model(pf, CoordinateGrid(n_u, n_v, 2))
        wall = interpolate_layers(mg2.points[:, :, 0], mg2.points[:, :, 1],
                                  n_w)
        grids[phase] = MaterialGrid(grid=CoordinateGrid(n_u, n_v, n_w),
                                    points=wall)
    return synthesize_cycle(grids["ed"], grids["es"], (sx, sy, sz),
                            subject_id=subject_id)


# ---------------------------------------------------------------------------
# two-layer fitting


def _chamfer_pair(model_pts, cloud: np.ndarray):
    """Symmetric mean squared nearest-neighbor distance, traced on the model
    side. The matching indices are recomputed from current values and held
    fixed within the step."""
    from . import autodiff as ad
    mp = ad.value(model_pts)
    d2 = ((mp[:, None, :] - cloud[None, :, :]) ** 2).sum(axis=-1)
    j_near = np.argmin(d2, axis=1)       # model -> cloud
    i_near = np.argmin(d2, axis=0)       # cloud -> model
    fwd = model_pts - cloud[j_near]
    bwd = ad.take0(model_pts, i_near) - cloud
    return ad.mean_(ad.sum_(fwd * fwd, axis=-1)) \
        + ad.mean_(ad.sum_(bwd * bwd, axis=-1))


def fit_two_layer(cloud: SubjectCloud, phase: str, iters: int = 400,
                  lr: float = 0.05, n_u: int = 16, n_v: int = 16,
                  patience: int | None = None,
                  row_smooth: float = 0.5) -> ParameterFunctions:
    """Recover two-layer shape parameters from boundary clouds by staged
    gradient descent on the symmetric Chamfer distance.

    Center and overall scales unlock first, aspect ratios at 30% of the
    iterations, centroid offsets at 50%; twist stays off. ``row_smooth``
    penalizes differences between neighboring u rows of the per-row
    parameters, which keeps rows without nearby cloud support tied to their
    constrained neighbors (it vanishes for u-constant profiles, so it adds
    no bias there). If the loss fails to improve over a full patience
    window, a warning is issued and the best iterate so far is returned.
    """
    from . import autodiff as ad
    if phase not in ("ed", "es"):
        raise ConfigError(f"phase must be 'ed' or 'es', got {phase!r}")
    inner = np.asarray(getattr(cloud, f"{phase}_inner"), dtype=np.float64)
    outer = np.asarray(getattr(cloud, f"{phase}_outer"), dtype=np.float64)
    if inner.size == 0 or outer.size == 0:
        raise DataError("empty cloud")

    # Geometry-aware start: the z extent of a surface is 1.5 * a0 * a3 (from
    # sin u spanning [-1, 1/2]) and the top sits at c_z + 0.5 * a0 * a3; the
    # widest xy radius is about a0 * a1. This pins the otherwise sloppy
    # trade-off between overall scale and center height.
    logit = lambda p: np.log(p / (1.0 - p))
    a3_init = 0.9
    log_a0, raw_cols, cz_votes = [], [], []
    cxy = np.concatenate([inner, outer], axis=0)[:, :2].mean(axis=0)
    for surf in (inner, outer):
        height = surf[:, 2].max() - surf[:, 2].min()
        a0a3 = height / 1.5
        a0 = a0a3 / a3_init
        cz_votes.append(surf[:, 2].max() - 0.5 * a0a3)
        r_xy = np.linalg.norm(surf[:, :2] - cxy, axis=1).max()
        a1 = np.clip(r_xy / a0, 0.05, 0.95)
        log_a0.append(np.log(a0))
        raw_cols.extend([logit(a1), logit(a1), logit(a3_init)])
    theta = {
        "c": np.array([cxy[0], cxy[1], np.mean(cz_votes)]),
        "log_a0": np.array(log_a0),
        # columns: a1, a2, a3 for inner then outer, constant over u at init
        "raw_a": np.tile(np.array(raw_cols), (n_u, 1)),
        "offs": np.zeros((n_u, 4)),      # e_xo, e_yo for inner then outer
    }
    grid = CoordinateGrid(n_u, n_v, 1)
    cos_u = np.cos(grid.u)[:, None].repeat(n_v, 1).reshape(-1)
    sin_u = np.sin(grid.u)[:, None].repeat(n_v, 1).reshape(-1)
    cos_v = np.cos(grid.v)[None, :].repeat(n_u, 0).reshape(-1)
    sin_v = np.sin(grid.v)[None, :].repeat(n_u, 0).reshape(-1)
    u_idx = np.arange(n_u)[:, None].repeat(n_v, 1).reshape(-1)
    n_pts = n_u * n_v

    def model_points(params, layer: int):
        a = ad.sigmoid(params["raw_a"])
        base = 3 * layer
        a0 = ad.exp(ad.col(params["log_a0"], layer))
        a1 = ad.take0(ad.col(a, base + 0), u_idx)
        a2 = ad.take0(ad.col(a, base + 1), u_idx)
        a3 = ad.take0(ad.col(a, base + 2), u_idx)
        exo = ad.take0(ad.col(params["offs"], 2 * layer), u_idx)
        eyo = ad.take0(ad.col(params["offs"], 2 * layer + 1), u_idx)
        x = a0 * a1 * (cos_u * cos_v) + exo + ad.col(params["c"], 0)
        y = a0 * a2 * (cos_u * sin_v) + eyo + ad.col(params["c"], 1)
        z = a0 * a3 * sin_u + ad.col(params["c"], 2)
        return ad.concat([ad.reshape(p, (n_pts, 1)) for p in (x, y, z)], axis=1)

    group_of = {"c": "center", "log_a0": "center", "raw_a": "aspect",
                "offs": "offsets"}
    fractions = {"center": 0.0, "aspect": 0.3, "offsets": 0.5}
    state = {}
    best = ({k: v.copy() for k, v in theta.items()}, np.inf)
    patience = patience or max(25, iters // 8)
    stall = 0
    row_a = np.arange(n_u - 1)
    row_b = np.arange(1, n_u)
    for it in range(iters):
        live = msl_schedule(it, iters, fractions)
        tape = ad.Tape()
        params = {k: ad.Tensor(v, tape) for k, v in theta.items()}
        loss = _chamfer_pair(model_points(params, 0), inner) \
            + _chamfer_pair(model_points(params, 1), outer)
        if row_smooth > 0:
            for name in ("raw_a", "offs"):
                d = ad.take0(params[name], row_b) - ad.take0(params[name], row_a)
                loss = loss + row_smooth * ad.mean_(d * d)
        loss_val = float(ad.value(loss))
        if loss_val < best[1] - 1e-12:
            best = ({k: v.copy() for k, v in theta.items()}, loss_val)
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                warnings.warn(
                    f"two-layer fit plateaued after {it} iterations; "
                    "returning best iterate")
                break
        grads = ad.backward(tape, loss)
        step_lr = lr if it < 0.7 * iters else 0.2 * lr
        for name, arr in theta.items():
            if not live.get(group_of[name], False):
                continue
            g = grads.get(params[name].id)
            if g is None:
                continue
            theta[name] = adam_step(arr, g, state, name, step_lr)

    theta = best[0]
    sig = 1.0 / (1.0 + np.exp(-theta["raw_a"]))
    return ParameterFunctions(
        a0=np.exp(theta["log_a0"]),
        a1=np.stack([sig[:, 0], sig[:, 3]], axis=1),
        a2=np.stack([sig[:, 1], sig[:, 4]], axis=1),
        a3=np.stack([sig[:, 2], sig[:, 5]], axis=1),
        tau=np.zeros((n_u, 2)),
        e_xo=np.stack([theta["offs"][:, 0], theta["offs"][:, 2]], axis=1),
        e_yo=np.stack([theta["offs"][:, 1], theta["offs"][:, 3]], axis=1),
        c=theta["c"].copy(), r=np.array([1.0, 0.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# quality checks


@dataclass
class QCRule:
    name: str
    passed: bool
    measured: dict


@dataclass
class QCReport:
    header: str
    rules: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rules)

    def to_dict(self) -> dict:
        return {"header": self.header, "passed": self.passed,
                "rules": [{"name": r.name, "passed": r.passed,
                           "measured": r.measured} for r in self.rules]}

    def to_text(self) -> str:
        lines = [self.header]
        for r in self.rules:
            vals = ", ".join(f"{k}={v:.6g}" for k, v in r.measured.items())
            lines.append(f"  [{'PASS' if r.passed else 'FAIL'}] {r.name}: {vals}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def quality_check(seq: MotionSequence) -> QCReport:
    """Physiology sanity rules on a motion sequence.

    R1: the apex barely moves (max apex displacement <= 10% of max basal).
    R2: base and apex rotate differently at ES (>= 0.02 rad apart).
    R4: ES longitudinal displacement magnitude decreases from base to apex
    across u-thirds.
    """
    if seq.t_frames < 2:
        raise DataError("quality_check needs at least 2 frames")
    f0 = seq.frames[0]
    n_u = seq.dims[0]
    disp_all = np.linalg.norm(seq.frames - f0[None], axis=-1)   # (T, u, v, w)
    apex_max = float(disp_all[:, 0].max())
    basal_max = float(disp_all[:, -1].max())
    r1 = QCRule("R1 apex near-immobility",
                basal_max > 0 and apex_max <= 0.1 * basal_max,
                {"apex_max_mm": apex_max, "basal_max_mm": basal_max})

    es = seq.frames[seq.es_index]
    thirds = np.array_split(np.arange(n_u), 3)

    def ring_rotation(u_rows):
        angles = []
        for i in u_rows:
            for w in range(seq.dims[2]):
                p0 = f0[i, :, w, :2] - f0[i, :, w, :2].mean(axis=0)
                p1 = es[i, :, w, :2] - es[i, :, w, :2].mean(axis=0)
                radius = np.linalg.norm(p0, axis=1)
                ok = radius > 1.0        # skip collapsed rings near the apex
                if not ok.any():
                    continue
                crossz = p0[ok, 0] * p1[ok, 1] - p0[ok, 1] * p1[ok, 0]
                dot = (p0[ok] * p1[ok]).sum(axis=1)
                angles.append(np.arctan2(crossz, dot).mean())
        return float(np.mean(angles)) if angles else np.nan

    rot_apex = ring_rotation(thirds[0])
    rot_base = ring_rotation(thirds[2])
    diff = abs(rot_base - rot_apex)
    r2 = QCRule("R2 differential rotation at ES",
                np.isfinite(diff) and diff >= 0.02,
                {"apical_rad": rot_apex, "basal_rad": rot_base,
                 "difference_rad": diff})

    dz = np.abs(es[..., 2] - f0[..., 2])
    means = [float(dz[rows].mean()) for rows in thirds]   # apex, mid, base
    r4 = QCRule("R4 longitudinal gradient at ES",
                means[2] >= means[1] >= means[0],
                {"apex_third_mm": means[0], "mid_third_mm": means[1],
                 "base_third_mm": means[2]})

    header = ("wall motion quality report "
              "(note: the ES torsion endpoints are configurable stand-in "
              "values, not subject-specific measurements)")
    return QCReport(header=header, rules=[r1, r2, r4])


def middle_layer_mesh(seq: MotionSequence):
    """Quad mesh of the middle wall layer at frame 0 (for self-intersection
    checks under Lagrangian deformation)."""
    mid = seq.dims[2] // 2
    return build_layer_mesh(seq.frame_grid(0), mid), mid
