"""Cohort synthesis: temporal scalars, clipping, subjects, fitting, QC."""

import numpy as np
import pytest

from tagtool import simulate as sim
from tagtool.errors import ConfigError, DataError
from tagtool.geometry import (CoordinateGrid, MaterialGrid,
                              interpolate_layers)

from helpers import min_active_count, tiny_subject, wall_params


def test_temporal_scalars_t20():
    sx, sy, sz, es = sim.temporal_scalars(20)
    assert sx.shape == sy.shape == sz.shape == (20,)
    assert sx[0] == sy[0] == sz[0] == 0.0
    assert es == 6
    assert sx[6] == sy[6] == sz[6] == 1.0
    assert (sx[1], sy[1], sz[1]) == (0.090, 0.080, 0.100)
    assert sz[14] == 0.3


def test_temporal_scalars_t8_subsamples_t20():
    sx8, sy8, sz8, es8 = sim.temporal_scalars(8)
    sx20, sy20, sz20, _ = sim.temporal_scalars(20)
    pick = [0, 2, 4, 6, 9, 12, 15, 18]
    assert np.array_equal(sx8, sx20[pick])
    assert np.array_equal(sy8, sy20[pick])
    assert np.array_equal(sz8, sz20[pick])
    assert es8 == 3


def test_temporal_scalars_unsupported_length():
    with pytest.raises(ConfigError):
        sim.temporal_scalars(5)


def test_signed_distances():
    pts = np.array([[1.0, 2.0, 3.0], [0.0, -4.0, -1.0]])
    sax = sim.ImagingPlane(0, "sax", z_offset=1.0)
    np.testing.assert_allclose(sax.signed_distance(pts), [2.0, -2.0])
    lax0 = sim.ImagingPlane(1, "lax", azimuth=0.0)     # normal (0, 1, 0)
    np.testing.assert_allclose(lax0.signed_distance(pts), [2.0, -4.0])
    lax90 = sim.ImagingPlane(2, "lax", azimuth=np.pi / 2)
    np.testing.assert_allclose(lax90.signed_distance(pts), [-1.0, 0.0],
                               atol=1e-12)


def test_default_planes_layout():
    seq, _ = tiny_subject(seed=3)
    mg = seq.frame_grid(0)
    planes = sim.default_planes(mg, 4, 2)
    assert len(planes) == 6
    assert [p.plane_id for p in planes] == list(range(6))
    z = mg.points[..., 2]
    for p in planes[:4]:
        assert p.view == "sax"
        assert z.min() < p.z_offset < z.max()
    offsets = [p.z_offset for p in planes[:4]]
    assert offsets == sorted(offsets)
    assert [p.view for p in planes[4:]] == ["lax", "lax"]
    np.testing.assert_allclose([p.azimuth for p in planes[4:]],
                               [0.0, np.pi / 2])
    with pytest.raises(ConfigError):
        sim.default_planes(mg, 0, 1)


def lattice(points):
    points = np.asarray(points, dtype=np.float64)
    n_u, n_v, n_w = points.shape[:3]
    return MaterialGrid(grid=CoordinateGrid(n_u, n_v, n_w), points=points)


def test_sax_clipping_linear_interpolation():
    # z grows linearly along u, so the crossing position is analytic
    pts = np.zeros((4, 3, 1, 3))
    for u in range(4):
        for v in range(3):
            pts[u, v, 0] = [float(u), float(v), float(u)]
    plane = sim.ImagingPlane(0, "sax", z_offset=1.5)
    out = sim.clip_plane(lattice(pts), plane, [0])
    assert len(out) == 3
    for v in range(3):
        key = (0, 0, sim.LINE_LON, v, 0)
        np.testing.assert_allclose(out[key], [1.5, float(v), 1.5], atol=1e-12)


def test_sax_clipping_touching_sample_emits_once():
    """A sample exactly on the plane counts as the positive side: one record."""
    pts = np.zeros((3, 3, 1, 3))
    for u in range(3):
        pts[u, :, 0, 2] = float(u) - 1.0       # z = -1, 0, 1
    plane = sim.ImagingPlane(0, "sax", z_offset=0.0)
    out = sim.clip_plane(lattice(pts), plane, [0])
    assert len(out) == 3
    for v in range(3):
        assert (0, 0, sim.LINE_LON, v, 0) in out
        assert abs(out[(0, 0, sim.LINE_LON, v, 0)][2]) < 1e-15


def test_lax_clipping_ordinal_rule():
    """Latitude ordinals: entering crossings first, then by segment index."""
    y_row = [-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0]
    pts = np.zeros((2, 8, 1, 3))
    for j in range(8):
        pts[0, j, 0] = [float(j), y_row[j], 0.0]
        pts[1, j, 0] = [float(j), -1.0, 0.0]    # row without crossings
    plane = sim.ImagingPlane(5, "lax", azimuth=0.0)
    out = sim.clip_plane(lattice(pts), plane, [0])
    assert len(out) == 4
    # entering segments 0 and 2 get ordinals 0 and 1; leaving 1 and 3 follow
    want_x = {0: 0.5, 1: 2.5, 2: 1.5, 3: 3.5}
    for ordinal, x in want_x.items():
        key = (5, 0, sim.LINE_LAT, 0, ordinal)
        np.testing.assert_allclose(out[key], [x, 0.0, 0.0], atol=1e-12)
    assert all(k[3] == 0 for k in out)


def test_clip_needs_layers():
    seq, _ = tiny_subject(seed=1)
    plane = sim.ImagingPlane(0, "sax", z_offset=0.0)
    with pytest.raises(DataError):
        sim.clip_plane(seq.frame_grid(0), plane, [])


def test_synthesize_cycle_endpoints_bit_exact():
    seq, _ = tiny_subject(seed=2, t_frames=8)
    subject = sim.generate_subject(2, n_u=6, n_v=8, n_cloud=60)
    inner, outer = sim.boundary_grids(subject, "ed")
    ed_wall = interpolate_layers(inner, outer, 3)
    assert np.array_equal(seq.frames[0], ed_wall)
    inner, outer = sim.boundary_grids(subject, "es")
    es_wall = interpolate_layers(inner, outer, 3)
    assert np.array_equal(seq.frames[seq.es_index], es_wall)
    assert seq.es_index == 3


def test_synthesize_cycle_validation():
    mg = lattice(np.random.default_rng(0).standard_normal((3, 4, 1, 3)))
    good = (np.array([0.0, 1.0]),) * 3
    sim.synthesize_cycle(mg, mg, good)
    bad0 = (np.array([0.1, 1.0]), np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(DataError):
        sim.synthesize_cycle(mg, mg, bad0)
    no_es = (np.array([0.0, 0.5]),) * 3
    with pytest.raises(DataError):
        sim.synthesize_cycle(mg, mg, no_es)
    with pytest.raises(DataError):
        sim.synthesize_cycle(mg, mg, (np.array([0.0, 1.0]),
                                      np.array([0.0, 1.0]),
                                      np.array([0.0, 1.0, 1.0])))


def test_spamm_records_lie_on_planes():
    seq, spamm = tiny_subject(seed=4)
    assert spamm.n_records > 0
    worst = 0.0
    for plane in spamm.planes:
        rows = spamm.plane_id == plane.plane_id
        for t in range(spamm.t_frames):
            present = rows & spamm.presence[:, t]
            if present.any():
                d = plane.signed_distance(spamm.pos[present, t])
                worst = max(worst, float(np.abs(d).max()))
    assert worst < 1e-9


def test_spamm_recompute_is_bit_identical():
    seq, spamm = tiny_subject(seed=5)
    planes = spamm.planes
    again = sim.compute_spamm_sequence(seq, planes)
    assert spamm.key_tuples() == again.key_tuples()
    assert np.array_equal(spamm.presence, again.presence)
    assert np.array_equal(spamm.pos, again.pos)


def test_spamm_keys_sorted_and_views_consistent():
    _, spamm = tiny_subject(seed=6)
    keys = spamm.key_tuples()
    assert keys == sorted(keys)
    for plane in spamm.planes:
        rows = spamm.plane_id == plane.plane_id
        want = sim.VIEW_SAX if plane.view == "sax" else sim.VIEW_LAX
        assert np.all(spamm.view[rows] == want)
        want_lt = sim.LINE_LON if plane.view == "sax" else sim.LINE_LAT
        assert np.all(spamm.line_type[rows] == want_lt)


def test_cue_selection_contracts():
    _, spamm = tiny_subject(seed=7)
    n_s = min(12, min_active_count(spamm))
    sel = spamm.cue_indices(0, n_s)
    assert sel.shape == (n_s,)
    assert np.all(np.diff(sel) > 0)                    # key order
    assert np.all(spamm.active_mask(0)[sel])
    assert spamm.cue_indices(0, n_s) is sel            # cached
    cues = spamm.cues(0, n_s)
    cues.validate()
    assert cues.counts[0] + cues.counts[1] == n_s
    sax_rows = sel[spamm.view[sel] == sim.VIEW_SAX]
    np.testing.assert_array_equal(cues.sax_q, spamm.pos[sax_rows, 0])
    np.testing.assert_array_equal(cues.sax_q1, spamm.pos[sax_rows, 1])


def test_cue_selection_errors():
    _, spamm = tiny_subject(seed=7)
    with pytest.raises(DataError):
        spamm.cue_indices(0, spamm.n_records + 1)
    with pytest.raises(DataError):
        spamm.active_mask(spamm.t_frames - 1)
    with pytest.raises(DataError):
        sim.compute_spamm_sequence(
            tiny_subject(seed=7)[0], spamm.planes, n_s=spamm.n_records + 1)


def test_generate_subject_deterministic():
    s1 = sim.generate_subject(42, n_u=6, n_v=8, n_cloud=40)
    s2 = sim.generate_subject(42, n_u=6, n_v=8, n_cloud=40)
    assert np.array_equal(s1.cloud.ed_inner, s2.cloud.ed_inner)
    assert np.array_equal(s1.truth_es.tau, s2.truth_es.tau)
    assert np.array_equal(s1.bumps_ed, s2.bumps_ed)
    s3 = sim.generate_subject(43, n_u=6, n_v=8, n_cloud=40)
    assert not np.array_equal(s1.cloud.ed_inner, s3.cloud.ed_inner)


def test_generate_subject_structure():
    s = sim.generate_subject(0, n_u=6, n_v=8, n_cloud=40)
    s.truth_ed.validate()
    s.truth_es.validate()
    assert s.truth_ed.n_w == 2
    assert s.bumps_ed.shape == (6, 8, 2, 3)
    assert s.cloud.ed_inner.shape == (40, 3)
    assert s.cloud.es_outer.shape == (40, 3)
    # systole contracts: ES inner scale below ED inner scale
    assert s.truth_es.a0[0] * s.truth_es.a1[0].mean() \
        < s.truth_ed.a0[0] * s.truth_ed.a1[0].mean()


def test_generate_subject_range_validation():
    with pytest.raises(ConfigError):
        sim.generate_subject(0, shape_ranges={"a1": (0.2, 1.4)})


def test_set_es_twist_profile():
    pf = wall_params(n_u=6, n_w=2)
    out = sim.set_es_twist(pf, apex=0.2, base=-0.1)
    assert out is not pf
    assert np.all(pf.tau == 0.0)                       # input untouched
    np.testing.assert_allclose(out.tau[0], 0.2, atol=1e-12)
    np.testing.assert_allclose(out.tau[-1], -0.1, atol=1e-12)
    # linear in u, constant across layers
    np.testing.assert_allclose(out.tau[:, 0], np.linspace(0.2, -0.1, 6),
                               atol=1e-12)
    np.testing.assert_array_equal(out.tau[:, 0], out.tau[:, 1])
    custom = np.linspace(0.5, 0.0, 6)
    out2 = sim.set_es_twist(pf, profile=custom)
    np.testing.assert_array_equal(out2.tau[:, 0], custom)


def test_build_sequence_shape():
    seq, _ = tiny_subject(seed=8, n_w=5, t_frames=8)
    assert seq.dims == (6, 8, 5)
    assert seq.t_frames == 8
    ev = seq.even_layers()
    assert ev.dims == (6, 8, 3)
    assert np.array_equal(ev.frames, seq.frames[:, :, :, [0, 2, 4]])


def test_quality_check_passes_generated_subjects():
    for seed in (0, 1):
        seq, _ = tiny_subject(seed=seed, n_u=9, n_v=10)
        report = sim.quality_check(seq)
        assert report.passed, report.to_text()
        text = report.to_text()
        assert "[PASS]" in text and "overall: PASS" in text
        d = report.to_dict()
        assert d["passed"] and len(d["rules"]) == 3


def test_quality_check_fails_rigid_translation():
    """Uniform translation moves the apex as much as the base: R1 must fail."""
    seq, _ = tiny_subject(seed=2)
    shift = np.zeros_like(seq.frames)
    shift[1:, ..., 0] = 5.0
    rigid = sim.MotionSequence(frames=seq.frames[0][None].repeat(
        seq.t_frames, axis=0) + shift, es_index=3, subject_id="rigid")
    report = sim.quality_check(rigid)
    assert not report.passed
    assert not report.rules[0].passed
    assert "FAIL" in report.to_text()


def test_quality_check_needs_two_frames():
    seq, _ = tiny_subject(seed=2)
    single = sim.MotionSequence(frames=seq.frames[:1], es_index=0)
    with pytest.raises(DataError):
        sim.quality_check(single)


def test_fit_two_layer_recovers_clean_surfaces():
    """Fitting clouds sampled noiselessly from a two-layer model should land
    within a fraction of a millimeter of the source surfaces."""
    pf = wall_params(n_u=12, n_w=2)
    pf.c = np.array([4.0, -2.0, 10.0])
    grid = CoordinateGrid(12, 14, 2)
    from tagtool.geometry import eval_model
    mg = eval_model(pf, grid)
    cloud = sim.SubjectCloud(
        ed_inner=mg.points[:, :, 0].reshape(-1, 3),
        ed_outer=mg.points[:, :, 1].reshape(-1, 3),
        es_inner=mg.points[:, :, 0].reshape(-1, 3),
        es_outer=mg.points[:, :, 1].reshape(-1, 3),
        subject_id="t", seed=0)
    fit = sim.fit_two_layer(cloud, "ed", iters=400, n_u=12, n_v=14)
    fit.validate()
    fit_mg = eval_model(fit, grid)
    d = np.linalg.norm(fit_mg.points - mg.points, axis=-1)
    assert d.mean() < 0.5, f"mean gap {d.mean():.3f} mm"
    assert d.max() < 2.0, f"max gap {d.max():.3f} mm"


def test_fit_two_layer_validation():
    s = sim.generate_subject(0, n_u=6, n_v=8, n_cloud=30)
    with pytest.raises(ConfigError):
        sim.fit_two_layer(s.cloud, "mid")
    empty = sim.SubjectCloud(ed_inner=np.zeros((0, 3)),
                             ed_outer=np.zeros((0, 3)),
                             es_inner=np.zeros((0, 3)),
                             es_outer=np.zeros((0, 3)),
                             subject_id="e", seed=0)
    with pytest.raises(DataError):
        sim.fit_two_layer(empty, "ed")


def test_fit_two_layer_plateau_warns():
    s = sim.generate_subject(1, n_u=6, n_v=8, n_cloud=30)
    with pytest.warns(UserWarning, match="plateaued"):
        sim.fit_two_layer(s.cloud, "ed", iters=60, lr=0.0, n_u=4, n_v=6)


def test_middle_layer_mesh():
    seq, _ = tiny_subject(seed=0, n_w=5)
    mesh, w = sim.middle_layer_mesh(seq)
    assert w == 2
    assert mesh.layer == 2
    assert mesh.vertices.shape == (6 * 8, 3)
