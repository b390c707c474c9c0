"""Normalization, sequential whole-cycle recovery, the optimization
baseline, and the evaluation metrics.

Recovery runs in a per-subject normalized frame: coordinates are centered on
the first-frame centroid and scaled per axis so the largest magnitude is
exactly 1.5. The network deforms one material point set frame by frame, so
point correspondence across the recovered cycle is automatic. Metrics (mean
absolute error in mm, self-intersection ratio of the middle wall layer) are
computed after mapping back to scanner coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericalError
from .flow import regularizer_terms
from .geometry import MaterialGrid, QuadMesh, build_layer_mesh, grid_edge_pairs
from .intersect import mesh_self_intersections
from .network import (ApparentMotionCues, GlobalStep, NetworkConfig,
                      _apply_global_ops, forward_psi, init_weights, knn,
                      ring_index_map)
from .training import TrainConfig, adam_step, train


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormMeta:
    """Affine map between scanner mm and the normalized recovery frame.

    ``center`` is the first-frame centroid; ``max_abs`` the per-axis maximum
    magnitude after centering. Normalized coordinates are
    ``(x - center) / max_abs * 1.5``, so the extreme coordinate per axis
    lands on 1.5 exactly.
    """

    center: np.ndarray
    max_abs: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        """mm per 1.0 normalized unit times 1.5 (the per-axis divisors)."""
        return self.max_abs / 1.5


def compute_norm(points: np.ndarray) -> NormMeta:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size == 0:
        raise DataError("cannot normalize an empty point set")
    center = pts.mean(axis=0)
    max_abs = np.abs(pts - center).max(axis=0)
    if (max_abs == 0).any():
        axis = "xyz"[int(np.argmax(max_abs == 0))]
        raise DataError(f"zero extent along {axis}; cannot normalize")
    return NormMeta(center=center, max_abs=max_abs)


def apply_norm(meta: NormMeta, points: np.ndarray) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - meta.center) \
        / meta.max_abs * 1.5


def invert_norm(meta: NormMeta, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) / 1.5 * meta.max_abs \
        + meta.center


def normalize_sequence(seq):
    """Normalized copy of a motion sequence; the map comes from frame 0."""
    meta = compute_norm(seq.frames[0].reshape(-1, 3))
    out = type(seq)(frames=apply_norm(meta, seq.frames),
                    es_index=seq.es_index, subject_id=seq.subject_id,
                    norm_meta=meta)
    return out, meta


def _normalized_cues(meta: NormMeta, cues: ApparentMotionCues):
    return ApparentMotionCues(
        sax_q=apply_norm(meta, cues.sax_q),
        sax_q1=apply_norm(meta, cues.sax_q1),
        lax_q=apply_norm(meta, cues.lax_q),
        lax_q1=apply_norm(meta, cues.lax_q1))


# ---------------------------------------------------------------------------
# sequential recovery


def _recover_frames(weights, m0_points: np.ndarray, dims: tuple, spamm,
                    n_s: int):
    """Yield (frame_mm, seconds) for each recovered frame after the first."""
    meta = compute_norm(m0_points)
    x = apply_norm(meta, m0_points)
    for q in range(spamm.t_frames - 1):
        cues = _normalized_cues(meta, spamm.cues(q, n_s))
        t0 = time.perf_counter()
        m_hat, _, _ = forward_psi(weights, x, cues, dims)
        dt = time.perf_counter() - t0
        yield invert_norm(meta, m_hat), dt
        x = m_hat


def sequential_recover(weights, m0: MaterialGrid, spamm, n_s: int,
                       es_index: int = 0):
    """Recover a whole cycle by chaining single-transition predictions.

    Frame 0 of the result is the input grid bit-exact; every later frame is
    the network's prediction from its own previous output and that
    transition's datapoint cues.
    """
    from .simulate import MotionSequence
    dims = (m0.grid.n_u, m0.grid.n_v, m0.grid.n_w)
    frames = [m0.points.copy()]
    for frame_flat, _ in _recover_frames(weights, m0.flat, dims, spamm, n_s):
        frames.append(frame_flat.reshape(m0.points.shape))
    return MotionSequence(frames=np.stack(frames), es_index=es_index)


# ---------------------------------------------------------------------------
# direct-fit baseline


def _stencil(cue_points: np.ndarray, material: np.ndarray, k: int = 4):
    """Inverse-distance interpolation stencil of each cue point over its k
    nearest material points."""
    idx = knn(cue_points, material, k)
    d = np.linalg.norm(material[idx] - cue_points[:, None, :], axis=-1)
    inv = 1.0 / np.maximum(d, 1e-12)
    return idx, inv / inv.sum(axis=1, keepdims=True)


def _view_term(pred_pts, target: np.ndarray, mask: np.ndarray):
    diff = (pred_pts - target) * mask
    return ad.mean_(ad.sum_(diff * diff, axis=-1))


def direct_fit_baseline(m_q, cues: ApparentMotionCues, dims: tuple,
                        iters: int = 150, lr: float = 0.05,
                        lambda_d: float = 0.0, lambda_s: float = 0.0):
    """Fit one transition without learned weights.

    Optimizes a per-ring global step and a free per-point displacement so
    that the deformed model, interpolated at each datapoint of the earlier
    frame (k=4 inverse-distance stencil), matches the later datapoints in
    the coordinates each view observes: x and y for SAX, z for LAX.

    Returns ``(m_next, q_g, q_d)``. With ``iters=0`` the identity step comes
    back unchanged. A loss exceeding 10x its initial value aborts.
    """
    pts = m_q.flat if isinstance(m_q, MaterialGrid) else \
        np.asarray(m_q, dtype=np.float64).reshape(-1, 3)
    n_u, n_v, n_w = dims
    if pts.shape[0] != n_u * n_v * n_w:
        raise DataError(f"points do not factor as dims {dims}")
    cues.validate()
    rmap = ring_index_map(n_u, n_v, n_w)
    n_rings = n_u * n_w
    edges = grid_edge_pairs(n_u, n_v, n_w)

    views = []
    if cues.sax_q.shape[0]:
        views.append((cues.sax_q, cues.sax_q1, np.array([1.0, 1.0, 0.0])))
    if cues.lax_q.shape[0]:
        views.append((cues.lax_q, cues.lax_q1, np.array([0.0, 0.0, 1.0])))
    stencils = [(_stencil(src, pts)) for src, _, _ in views]

    theta = {"delta": np.zeros((n_rings, 3)), "tau": np.zeros(n_rings),
             "q_d": np.zeros_like(pts)}
    state: dict = {}
    initial_loss = None
    for it in range(iters):
        tape = ad.Tape()
        p = {k: ad.Tensor(v, tape) for k, v in theta.items()}
        gstep = GlobalStep(a=ad.exp(p["delta"]), tau=p["tau"])
        m_hat = _apply_global_ops(pts, gstep, rmap) + p["q_d"]
        loss = None
        for (src, dst, mask), (idx, wts) in zip(views, stencils):
            gathered = ad.take0(m_hat, idx)              # (S, 4, 3)
            pred = ad.sum_(gathered * wts[:, :, None], axis=1)
            term = _view_term(pred, dst, mask)
            loss = term if loss is None else loss + term
        if lambda_d or lambda_s:
            l_d, l_s = regularizer_terms(p["q_d"], edges)
            loss = loss + lambda_d * l_d + lambda_s * l_s
        loss_val = float(ad.value(loss))
        if not np.isfinite(loss_val):
            raise NumericalError(f"baseline fit produced a non-finite loss "
                                 f"at iteration {it}")
        if loss_val < 1e-14:
            break                       # already a perfect fit
        if initial_loss is None:
            initial_loss = loss_val
        elif loss_val > 10.0 * initial_loss and loss_val > 1e-8:
            raise NumericalError(
                f"baseline fit diverged at iteration {it}: loss {loss_val:g} "
                f"exceeds 10x initial {initial_loss:g}")
        grads = ad.backward(tape, loss)
        for name in theta:
            g = grads.get(p[name].id)
            if g is None:
                continue
            theta[name] = adam_step(theta[name], g, state, name, lr)

    q_g = GlobalStep(a=np.exp(theta["delta"]), tau=theta["tau"])
    q_d = theta["q_d"]
    m_next = ad.value(_apply_global_ops(pts, q_g, rmap)) + q_d
    return m_next, q_g, q_d


def cue_residual(m_q, m_next: np.ndarray, cues: ApparentMotionCues) -> float:
    """Mean per-cue mismatch (in the observed coordinates) of a fitted step.

    The deformed model is interpolated at each earlier-frame datapoint with
    the same k=4 stencil the baseline uses.
    """
    pts = m_q.flat if isinstance(m_q, MaterialGrid) else \
        np.asarray(m_q, dtype=np.float64).reshape(-1, 3)
    nxt = np.asarray(m_next, dtype=np.float64).reshape(-1, 3)
    parts = []
    for src, dst, mask in (
            (cues.sax_q, cues.sax_q1, np.array([1.0, 1.0, 0.0])),
            (cues.lax_q, cues.lax_q1, np.array([0.0, 0.0, 1.0]))):
        if src.shape[0] == 0:
            continue
        idx, wts = _stencil(src, pts)
        pred = (nxt[idx] * wts[:, :, None]).sum(axis=1)
        parts.append(np.linalg.norm((pred - dst) * mask, axis=-1))
    if not parts:
        raise DataError("cue_residual needs at least one non-empty view")
    return float(np.concatenate(parts).mean())


# ---------------------------------------------------------------------------
# metrics


def mae(predicted, truth):
    """Mean absolute error in mm: average over frames 1..T-1 of the mean
    Euclidean point distance. Returns (scalar, per-frame array)."""
    if predicted.frames.shape != truth.frames.shape:
        raise DataError(
            f"sequence shapes differ: {predicted.frames.shape} vs "
            f"{truth.frames.shape}")
    if predicted.t_frames < 2:
        raise DataError("mae needs at least 2 frames")
    d = np.linalg.norm(predicted.frames - truth.frames, axis=-1)
    per_frame = d.reshape(d.shape[0], -1).mean(axis=1)[1:]
    return float(per_frame.mean()), per_frame


def zero_motion_mae(truth) -> float:
    """MAE of always predicting the first frame (the identity network)."""
    d = np.linalg.norm(truth.frames[1:] - truth.frames[:1], axis=-1)
    return float(d.reshape(d.shape[0], -1).mean(axis=1).mean())


def si_ratio(mesh: QuadMesh, eps: float = 1e-9) -> float:
    """Self-intersection ratio of a quad mesh: the fraction of triangles
    (fixed-diagonal split) crossing any triangle they share no vertex with."""
    tris = mesh.triangles()
    report = mesh_self_intersections(mesh.vertices, tris, eps)
    return report.ratio


def sequence_si(seq, layer: int | None = None) -> np.ndarray:
    """Per-frame SI ratio of one material layer (middle layer by default)."""
    n_w = seq.dims[2]
    w = n_w // 2 if layer is None else layer
    if not 0 <= w < n_w:
        raise DataError(f"layer {w} outside 0..{n_w - 1}")
    return np.array([si_ratio(build_layer_mesh(seq.frame_grid(t), w))
                     for t in range(seq.t_frames)])


@dataclass
class EvalReport:
    """Evaluation of one recovered cycle against ground truth."""

    subject_id: str
    per_frame_err: np.ndarray     # (T-1,) mm, frames 1..T-1
    mae_mm: float
    si_per_frame: np.ndarray      # (T,)
    si_mean: float
    runtime_per_frame: np.ndarray  # (T-1,) seconds, zeros if timing off
    runtime_total: float


def evaluate_subject(weights, truth, spamm, n_s: int,
                     si_layer: int | None = None,
                     emit_timing: bool = True) -> EvalReport:
    """Recover a subject's cycle and score it.

    ``truth`` is the ground-truth recovery-layer sequence in mm; recovery
    starts from its first frame. With ``emit_timing`` off all runtimes are
    reported as zero so repeated runs serialize identically.
    """
    m0 = truth.frame_grid(0)
    dims = truth.dims
    frames = [m0.points.copy()]
    times = []
    for frame_flat, dt in _recover_frames(weights, m0.flat, dims, spamm, n_s):
        frames.append(frame_flat.reshape(m0.points.shape))
        times.append(dt)
    from .simulate import MotionSequence
    recovered = MotionSequence(frames=np.stack(frames),
                               es_index=truth.es_index,
                               subject_id=truth.subject_id)
    mae_mm, per_frame = mae(recovered, truth)
    si = sequence_si(recovered, si_layer)
    runtime = np.array(times) if emit_timing else np.zeros(len(times))
    return EvalReport(subject_id=truth.subject_id, per_frame_err=per_frame,
                      mae_mm=mae_mm, si_per_frame=si, si_mean=float(si.mean()),
                      runtime_per_frame=runtime,
                      runtime_total=float(runtime.sum()))


def write_eval_csv(reports: list, path):
    """Per-frame metric rows plus one summary row per subject."""
    lines = ["subject_id,frame,abs_err_mm,si_ratio,runtime_s"]
    for rep in reports:
        for q in range(rep.per_frame_err.shape[0]):
            lines.append(f"{rep.subject_id},{q + 1},"
                         f"{rep.per_frame_err[q]:.12g},"
                         f"{rep.si_per_frame[q + 1]:.12g},"
                         f"{rep.runtime_per_frame[q]:.12g}")
        lines.append(f"{rep.subject_id},summary,{rep.mae_mm:.12g},"
                     f"{rep.si_mean:.12g},{rep.runtime_total:.12g}")
    text = "\n".join(lines) + "\n"
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_FIELDS = ("k", "mode", "cue_mode", "stage2", "mae_mm", "si_mean",
                   "runtime_s")


def ablation_harness(train_subjects: list, eval_items: list,
                     net_base: NetworkConfig, tc_base: TrainConfig,
                     seed: int, n_s: int, ks=(8, 16, 24),
                     modes=("full", "global_only", "local_only"),
                     cue_modes=("mixed", "separated"),
                     stage2_options=(True,),
                     emit_timing: bool = True) -> list:
    """Train and evaluate every cell of the ablation matrix.

    ``eval_items`` holds (truth_sequence, spamm) pairs in mm. Each cell gets
    a fresh seed-deterministic initialization; rows report the mean MAE and
    SI over the evaluation subjects plus the cell's wall time.
    """
    if not train_subjects or not eval_items:
        raise ConfigError("ablation needs training and evaluation subjects")
    rows = []
    for k in ks:
        for mode in modes:
            for cue_mode in cue_modes:
                for stage2 in stage2_options:
                    t0 = time.perf_counter()
                    cfg = NetworkConfig(
                        c_h=net_base.c_h, c_z=net_base.c_z,
                        widths=net_base.widths,
                        down_ratio=net_base.down_ratio,
                        k_cross=k, k_self=k,
                        n_up_neighbors=net_base.n_up_neighbors,
                        head_hidden=net_base.head_hidden,
                        vel_hidden=net_base.vel_hidden,
                        flow_steps=net_base.flow_steps,
                        mode=mode, cue_mode=cue_mode,
                        value_displacement=net_base.value_displacement,
                        value_gain=net_base.value_gain)
                    tc = TrainConfig(
                        e1=tc_base.e1, e2=tc_base.e2 if stage2 else 0,
                        lr=tc_base.lr, lambda_d=tc_base.lambda_d,
                        lambda_s=tc_base.lambda_s, window=tc_base.window,
                        msl_fractions=dict(tc_base.msl_fractions))
                    weights, _, _ = train(train_subjects, cfg, tc, seed)
                    maes, sis = [], []
                    for truth, spamm in eval_items:
                        rep = evaluate_subject(weights, truth, spamm, n_s,
                                               emit_timing=False)
                        maes.append(rep.mae_mm)
                        sis.append(rep.si_mean)
                    dt = time.perf_counter() - t0
                    rows.append({
                        "k": k, "mode": mode, "cue_mode": cue_mode,
                        "stage2": int(stage2),
                        "mae_mm": float(np.mean(maes)),
                        "si_mean": float(np.mean(sis)),
                        "runtime_s": dt if emit_timing else 0.0})
    return rows


def write_ablation_csv(rows: list, path):
    lines = [",".join(ABLATION_FIELDS)]
    for r in rows:
        lines.append(f"{r['k']},{r['mode']},{r['cue_mode']},{r['stage2']},"
                     f"{r['mae_mm']:.12g},{r['si_mean']:.12g},"
                     f"{r['runtime_s']:.12g}")
    text = "\n".join(lines) + "\n"
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text
