"""Release gate: ten numbered end-to-end checks with hard tolerances and
runtime budgets. Each test prints one PASS/FAIL line; the desk cohort is
shared between the clipping and the end-to-end training checks, so run this
module in one piece. The two training checks dominate the wall time.
"""

import dataclasses
import json
import shutil
import time

import numpy as np
import pytest

from helpers import (randomize_weights, small_grid_model, tiny_net_config,
                     tiny_subject)
from tagtool import autodiff as ad
from tagtool import cli, formats, recover, simulate, training
from tagtool.config import desk_config
from tagtool.flow import integrate_flow, invert_flow, regularizer_terms
from tagtool.geometry import eval_model, grid_edge_pairs, interpolate_layers
from tagtool.network import ApparentMotionCues, forward_psi, init_weights
from tagtool.pipeline import load_eval_set, load_training_set, run_simulate


def _report(num: int, name: str, t0: float, budget_s: float, failures: list):
    dt = time.perf_counter() - t0
    if dt >= budget_s:
        failures.append(f"runtime {dt:.1f} s exceeds {budget_s:.0f} s budget")
    status = "FAIL" if failures else "PASS"
    print(f"[{status}] criterion {num:02d} {name}: {dt:.1f} s "
          f"(budget {budget_s:.0f} s)")
    assert not failures, f"criterion {num}: " + "; ".join(failures)


@pytest.fixture(scope="module")
def desk_cohort(tmp_path_factory):
    """The 8-subject desk cohort (16x16x5 grid, T=8, 4 SAX + 2 LAX planes)."""
    cfg = desk_config()
    cfg.seed = 30
    cfg.out_dir = str(tmp_path_factory.mktemp("desk") / "run")
    manifest = run_simulate(cfg)
    return cfg, manifest


def test_criterion_01_geometry_exactness():
    t0 = time.perf_counter()
    failures = []
    pf, grid, mg = small_grid_model(n_u=7, n_v=9, n_w=3, seed=3)
    pts = mg.points

    # apex collapse: every v at the lowest u lands on the closed-form apex
    apex = np.stack([pf.e_xo[0], pf.e_yo[0], -pf.a0 * pf.a3[0]], axis=-1)
    gap = np.abs(pts[0] - apex[None, :, :]).max()
    if gap > 1e-12:
        failures.append(f"apex collapse off by {gap:.3g}")

    # twist isometry: each (u, w) ring keeps its pairwise distances and z
    pf_tw = dataclasses.replace(
        pf, tau=pf.tau + np.random.default_rng(5).normal(0, 0.3, pf.tau.shape))
    tw = eval_model(pf_tw, grid).points
    worst = 0.0
    for u in range(pts.shape[0]):
        for w in range(pts.shape[2]):
            a, b = pts[u, :, w], tw[u, :, w]
            da = np.linalg.norm(a[:, None] - a[None, :], axis=-1)
            db = np.linalg.norm(b[:, None] - b[None, :], axis=-1)
            worst = max(worst, np.abs(da - db).max(),
                        np.abs(a[:, 2] - b[:, 2]).max())
    if worst > 1e-12:
        failures.append(f"twist isometry off by {worst:.3g}")

    # pose isometry: moving the center and rotating preserves all distances
    half = 0.35
    quat = np.array([np.cos(half), *(np.sin(half) *
                                     np.array([1.0, 2.0, 3.0]) /
                                     np.sqrt(14.0))])
    pf_pose = dataclasses.replace(pf, c=np.array([5.0, -3.0, 2.0]), r=quat)
    posed = eval_model(pf_pose, grid).points.reshape(-1, 3)
    base = pts.reshape(-1, 3)
    d0 = np.linalg.norm(base[:, None] - base[None, :], axis=-1)
    d1 = np.linalg.norm(posed[:, None] - posed[None, :], axis=-1)
    gap = np.abs(d0 - d1).max()
    if gap > 1e-12:
        failures.append(f"pose isometry off by {gap:.3g}")

    # layer interpolation returns the wall surfaces at the endpoints
    inner, outer = pts[:, :, 0], pts[:, :, 2]
    stack = interpolate_layers(inner, outer, 5)
    gap = max(np.abs(stack[:, :, 0] - inner).max(),
              np.abs(stack[:, :, -1] - outer).max())
    if gap > 1e-12:
        failures.append(f"layer endpoints off by {gap:.3g}")

    _report(1, "geometry exactness", t0, 1.0, failures)


def test_criterion_02_clipping_soundness(desk_cohort):
    cfg, manifest = desk_cohort
    t0 = time.perf_counter()
    failures = []
    worst = 0.0
    n_points = 0
    for sid in manifest["subjects"]:
        seq = formats.read_sequence(f"{cfg.out_dir}/{sid}.seq")
        stored = open(f"{cfg.out_dir}/{sid}.spamm", "rb").read()
        spamm = formats.read_spamm(f"{cfg.out_dir}/{sid}.spamm")
        by_id = {p.plane_id: p for p in spamm.planes}
        for r in range(spamm.n_records):
            plane = by_id[int(spamm.plane_id[r])]
            present = spamm.presence[r]
            d = plane.signed_distance(spamm.pos[r][present])
            worst = max(worst, float(np.abs(d).max()) if d.size else 0.0)
            n_points += int(present.sum())
        # re-clip from the stored truth: keys and bytes must reproduce
        again = simulate.compute_spamm_sequence(seq, spamm.planes,
                                                n_s=cfg.n_s)
        if again.key_tuples() != spamm.key_tuples():
            failures.append(f"{sid}: correspondence keys changed on re-clip")
        if formats.spamm_bytes(again) != stored:
            failures.append(f"{sid}: datapoint bytes changed on re-clip")
    if worst > 1e-9:
        failures.append(f"max on-plane distance {worst:.3g} mm exceeds 1e-9")
    if n_points == 0:
        failures.append("no datapoints present at all")
    _report(2, "clipping soundness", t0, 30.0, failures)


def test_criterion_03_temporal_scalars():
    t0 = time.perf_counter()
    failures = []
    sx, sy, sz, es = simulate.temporal_scalars(20)
    if not (sx[1] == 0.090 and sy[1] == 0.080 and sz[1] == 0.100):
        failures.append(f"t_1 scalars ({sx[1]}, {sy[1]}, {sz[1]}) "
                        "!= (0.090, 0.080, 0.100)")
    if not (sx[0] == sy[0] == sz[0] == 0.0):
        failures.append("schedules do not start at 0")
    if not (sx[es] == sy[es] == sz[es] == 1.0):
        failures.append("schedules do not reach 1 at the ES index")

    _, _, ed = small_grid_model(n_u=6, n_v=8, n_w=2, seed=11)
    _, _, es_grid = small_grid_model(n_u=6, n_v=8, n_w=2, seed=12)
    sx8, sy8, sz8, es8 = simulate.temporal_scalars(8)
    seq = simulate.synthesize_cycle(ed, es_grid, (sx8, sy8, sz8),
                                    subject_id="t")
    if not np.array_equal(seq.frames[0], ed.points):
        failures.append("frame 0 is not bit-exactly the ED grid")
    if not np.array_equal(seq.frames[es8], es_grid.points):
        failures.append("the ES frame is not bit-exactly the ES grid")
    _report(3, "temporal scalars", t0, 1.0, failures)


def test_criterion_04_flow_correctness():
    t0 = time.perf_counter()
    failures = []
    rng = np.random.default_rng(21)
    pts = rng.normal(0.0, 1.0, (40, 3))

    # constant field: RK4 is exact to machine precision
    c_vec = np.array([0.3, -0.2, 0.15])
    res = integrate_flow(lambda x, h, z: np.broadcast_to(c_vec, x.shape),
                         pts, steps=8)
    gap = np.abs(res.displaced - (pts + c_vec)).max()
    if gap > 1e-13:
        failures.append(f"constant field error {gap:.3g}")

    # linear field: compare against the matrix exponential
    from scipy.linalg import expm
    a_mat = 0.5 * rng.normal(0.0, 1.0, (3, 3))
    res = integrate_flow(lambda x, h, z: x @ a_mat.T, pts, steps=8)
    exact = pts @ expm(a_mat).T
    rel = np.abs(res.displaced - exact).max() / np.abs(exact).max()
    if rel > 1e-5:
        failures.append(f"linear field relative error {rel:.3g}")

    # forward-backward round trip on a smooth bounded field
    a2 = 0.4 * rng.normal(0.0, 1.0, (3, 3))
    b2 = rng.normal(0.0, 1.0, 3)
    field = lambda x, h, z: np.sin(x @ a2.T + b2) * (1.0 + 0.3 * h)
    fwd = integrate_flow(field, pts, steps=8)
    back = invert_flow(field, fwd.displaced, steps=8)
    gap = np.abs(back.displaced - pts).max()
    if gap > 1e-6:
        failures.append(f"round-trip error {gap:.3g} mm")

    # small-velocity flows cannot fold the wall mesh
    seq, _ = tiny_subject(seed=3, n_u=8, n_v=10, n_w=3)
    mesh, _ = simulate.middle_layer_mesh(seq)
    for trial in range(3):
        a3 = 0.5 * rng.normal(0.0, 1.0, (3, 3))
        b3 = rng.normal(0.0, 1.0, 3)
        bounded = lambda x, h, z: (0.1 / np.sqrt(3.0)) * np.sin(x @ a3.T + b3)
        moved = integrate_flow(bounded, mesh.vertices, steps=8)
        si = recover.si_ratio(type(mesh)(vertices=moved.displaced,
                                         faces=mesh.faces, layer=mesh.layer))
        if si != 0.0:
            failures.append(f"trial {trial}: SI ratio {si} on a "
                            "|v| <= 0.1 flow")
    _report(4, "flow correctness", t0, 10.0, failures)


def test_criterion_05_gradient_correctness():
    t0 = time.perf_counter()
    failures = []
    seq, spamm = tiny_subject(seed=40, n_u=8, n_v=10, n_w=3, n_sax=3,
                              n_lax=2, n_s=None)
    sub = training.prepare_subject(seq, spamm, spamm.n_records)
    assert sub.frames.shape[1] <= 500
    cfg = tiny_net_config(k_cross=8, k_self=8)
    weights = randomize_weights(init_weights(cfg, seed=0), seed=1)
    q = 2
    x, target = sub.frames[q], sub.frames[q + 1]
    cues = sub.cues[q]
    edges = grid_edge_pairs(*sub.dims)
    lam_d, lam_s = 0.1, 0.05

    def loss_value(w):
        m_hat, _, q_d = forward_psi(w, x, cues, sub.dims)
        data = float(((m_hat - target) ** 2).sum(-1).mean())
        l_d, l_s = regularizer_terms(q_d, edges)
        return data + lam_d * float(ad.value(l_d)) + lam_s * float(ad.value(l_s))

    tape = ad.Tape()
    params = weights.bind(tape)
    m_hat, _, q_d = forward_psi(weights, x, cues, sub.dims, params=params)
    diff = m_hat - target
    l_d, l_s = regularizer_terms(q_d, edges)
    loss = ad.mean_(ad.sum_(diff * diff, axis=-1)) + lam_d * l_d + lam_s * l_s
    grads = ad.backward(tape, loss)

    n_params = sum(v.size for v in weights.tensors.values())
    n_checked = 0
    worst_rel = 0.0
    for name in sorted(weights.tensors):
        arr = weights.tensors[name]
        g = grads.get(params[name].id)
        g = np.zeros_like(arr) if g is None else g
        flat = arr.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            h = 1e-5 * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value(weights)
            flat[i] = orig - h
            dn = loss_value(weights)
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            denom = max(abs(fd), abs(g_flat[i]), 1e-6)
            rel = abs(fd - g_flat[i]) / denom
            worst_rel = max(worst_rel, rel)
            n_checked += 1
            if rel > 1e-4:
                failures.append(f"{name}[{i}]: grad {g_flat[i]:.6g} vs "
                                f"fd {fd:.6g} (rel {rel:.3g})")
                if len(failures) > 5:
                    break
        if len(failures) > 5:
            break
    if n_checked != n_params:
        failures.append(f"checked {n_checked} of {n_params} parameters")
    print(f"  checked {n_checked} parameters, worst relative error "
          f"{worst_rel:.3g}")
    _report(5, "gradient correctness", t0, 300.0, failures)


def test_criterion_06_identity_initialization():
    t0 = time.perf_counter()
    failures = []
    seq, spamm = tiny_subject(seed=7)
    sub = training.prepare_subject(seq, spamm, spamm.n_records)
    weights = init_weights(tiny_net_config(), seed=4)
    m_hat, gstep, q_d = forward_psi(weights, sub.frames[0], sub.cues[0],
                                    sub.dims)
    if not np.array_equal(m_hat, sub.frames[0]):
        failures.append("forward is not bit-exactly the identity")
    if not (np.all(gstep.a == 1.0) and np.all(gstep.tau == 0.0)):
        failures.append("global step is not the identity")
    if not np.all(q_d == 0.0):
        failures.append("local displacement is not zero")
    _report(6, "identity initialization", t0, 5.0, failures)


def test_criterion_07_toy_end_to_end(desk_cohort):
    cfg, manifest = desk_cohort
    t0 = time.perf_counter()
    failures = []
    subs = load_training_set(cfg, manifest)
    eval_items = load_eval_set(cfg, manifest)
    assert len(subs) == 6 and len(eval_items) == 2
    assert cfg.train.e1 == 200 and cfg.train.e2 == 50
    weights, rows, _ = training.train(subs, cfg.network, cfg.train, cfg.seed)
    ratios, sis = [], []
    for truth, spamm in eval_items:
        rep = recover.evaluate_subject(weights, truth, spamm, cfg.n_s,
                                       emit_timing=False)
        zero = recover.zero_motion_mae(truth)
        ratios.append(rep.mae_mm / zero)
        sis.append(rep.si_mean)
        print(f"  {rep.subject_id}: MAE {rep.mae_mm:.4f} mm, zero-motion "
              f"{zero:.4f} mm, ratio {ratios[-1]:.3f}, SI {sis[-1]:.4f}")
    if np.mean(ratios) > 0.5:
        failures.append(f"mean MAE ratio {np.mean(ratios):.3f} > 0.5")
    if np.mean(sis) >= 0.05:
        failures.append(f"mean SI ratio {np.mean(sis):.4f} >= 0.05")
    _report(7, "toy end-to-end", t0, 7200.0, failures)


def test_criterion_08_direct_fit_baseline():
    t0 = time.perf_counter()
    failures = []
    seq, _ = tiny_subject(seed=0)
    m0 = seq.frame_grid(0)
    meta = recover.compute_norm(m0.flat)
    pts = recover.apply_norm(meta, m0.flat)
    rng = np.random.default_rng(31)
    picks = rng.choice(pts.shape[0], size=24, replace=False)
    sax, lax = pts[picks[:14]], pts[picks[14:]]

    # rigid translation: the fitted transition must absorb it
    shift = np.array([0.04, -0.03, 0.05])
    cues = ApparentMotionCues(sax_q=sax, sax_q1=sax + shift,
                              lax_q=lax, lax_q1=lax + shift)
    m_next, _, _ = recover.direct_fit_baseline(pts, cues, seq.dims,
                                               iters=200, lr=0.05)
    res = recover.cue_residual(pts, m_next, cues)
    if res >= 1e-3:
        failures.append(f"translation residual {res:.3g} >= 1e-3")

    # null motion: nothing should move
    cues0 = type(cues)(sax_q=sax, sax_q1=sax.copy(),
                       lax_q=lax, lax_q1=lax.copy())
    _, _, q_d = recover.direct_fit_baseline(pts, cues0, seq.dims, iters=80)
    mean_qd = float(np.linalg.norm(q_d, axis=-1).mean())
    if mean_qd >= 1e-3:
        failures.append(f"null-motion mean |q_d| {mean_qd:.3g} >= 1e-3")
    _report(8, "direct-fit baseline", t0, 60.0, failures)


def test_criterion_09_ablation_harness():
    t0 = time.perf_counter()
    failures = []
    packs = [tiny_subject(seed=60 + i, n_u=8, n_v=10, n_w=3, n_sax=3,
                          n_lax=2, n_s=None) for i in range(3)]
    train_subjects = [training.prepare_subject(s, sp, sp.n_records)
                      for s, sp in packs[:2]]
    eval_items = [(s.even_layers(), sp) for s, sp in packs[2:]]
    net_base = tiny_net_config()
    tc_base = training.TrainConfig(e1=40, e2=5, lr=1e-3)
    rows = recover.ablation_harness(
        train_subjects, eval_items, net_base, tc_base, seed=9,
        n_s=packs[2][1].n_records, emit_timing=False)
    if len(rows) != 18:
        failures.append(f"matrix produced {len(rows)} cells, expected 18")
    for row in rows:
        if not (np.isfinite(row["mae_mm"]) and np.isfinite(row["si_mean"])):
            failures.append(f"non-finite metrics in cell {row}")
    full_mixed = {r["k"]: r["mae_mm"] for r in rows
                  if r["mode"] == "full" and r["cue_mode"] == "mixed"}
    for row in rows:
        if row["mode"] in ("global_only", "local_only"):
            if full_mixed[row["k"]] > row["mae_mm"]:
                failures.append(
                    f"k={row['k']}: full+mixed {full_mixed[row['k']]:.4f} mm "
                    f"worse than {row['mode']}+{row['cue_mode']} "
                    f"{row['mae_mm']:.4f} mm")
    _report(9, "ablation harness", t0, 3600.0, failures)


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    failures = []
    out = tmp_path / "run"
    cfg = {
        "profile": "desk", "seed": 13, "n_s": 24, "out_dir": str(out),
        "sim": {"n_u": 6, "n_v": 8, "n_w": 3, "t_frames": 8, "n_sax": 2,
                "n_lax": 1, "n_subjects": 3, "n_train": 2, "n_cloud": 60},
        "network": {"c_h": 6, "c_z": 8, "widths": [8, 10, 12],
                    "down_ratio": 2, "k_cross": 4, "k_self": 4,
                    "n_up_neighbors": 2, "head_hidden": 6,
                    "vel_hidden": [8], "flow_steps": 2},
        "train": {"e1": 2, "e2": 1, "lr": 0.001},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    def one_run():
        assert cli.main(["simulate", "--config", str(cfg_path)]) == 0
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        sid = manifest["eval"][0]
        assert cli.main(["recover", "--config", str(cfg_path),
                         "--checkpoint", str(out / "checkpoint.ckpt"),
                         "--subject", sid]) == 0
        assert cli.main(["eval", "--config", str(cfg_path),
                         "--pred", str(out / f"{sid}.pred.seq"),
                         "--truth", str(out / f"{sid}.seq")]) == 0
        return {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    first = one_run()
    shutil.rmtree(out)
    second = one_run()
    if sorted(first) != sorted(second):
        failures.append(f"file sets differ: {sorted(first)} vs "
                        f"{sorted(second)}")
    else:
        for name in first:
            if first[name] != second[name]:
                failures.append(f"{name} differs between identical runs")
    _report(10, "determinism", t0, 600.0, failures)
