"""End-to-end pipeline steps shared by the CLI and the acceptance tests.

Each step reads and writes the bit-exact file formats, so any stage can be
rerun or inspected in isolation. A cohort lives in one output directory:
``<id>.seq`` (ground-truth motion), ``<id>.spamm`` (tracked datapoints),
``<id>.qc.txt`` (quality report), and ``manifest.json`` naming the
train/eval split.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import formats, recover, simulate, training
from .config import RunConfig, config_to_dict
from .errors import ConfigError, DataError


def subject_seed(cfg_seed: int, index: int) -> int:
    """Distinct per-subject seed; stable under config seed changes."""
    return cfg_seed * 1000 + index


def build_subject_bundle(cfg: RunConfig, index: int) -> dict:
    """Generate one subject: ground-truth sequence, datapoints, QC report."""
    sim = cfg.sim
    ranges = {"twist_apex": sim.twist_apex, "twist_base": sim.twist_base}
    subject = simulate.generate_subject(
        seed=subject_seed(cfg.seed, index), shape_ranges=ranges,
        n_u=sim.n_u, n_v=sim.n_v, noise_mm=sim.noise_mm,
        n_cloud=sim.n_cloud)
    if sim.use_true_params:
        seq = simulate.build_sequence(subject, sim.n_w, sim.t_frames)
    else:
        fit_ed = simulate.fit_two_layer(subject.cloud, "ed",
                                        iters=sim.fit_iters, lr=sim.fit_lr,
                                        n_u=sim.n_u, n_v=sim.n_v)
        fit_es = simulate.fit_two_layer(subject.cloud, "es",
                                        iters=sim.fit_iters, lr=sim.fit_lr,
                                        n_u=sim.n_u, n_v=sim.n_v)
        fit_es = simulate.set_es_twist(fit_es, apex=sim.twist_apex,
                                       base=sim.twist_base)
        seq = simulate.sequence_from_params(fit_ed, fit_es, sim.n_v,
                                            sim.n_w, sim.t_frames,
                                            subject_id=subject.subject_id)
    planes = simulate.default_planes(seq.frame_grid(0), sim.n_sax, sim.n_lax)
    spamm = simulate.compute_spamm_sequence(seq, planes, n_s=cfg.n_s)
    qc = simulate.quality_check(seq)
    return {"subject": subject, "seq": seq, "spamm": spamm, "qc": qc}


def run_simulate(cfg: RunConfig) -> dict:
    """Build the whole cohort and write every per-subject artifact."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    ids = []
    for i in range(cfg.sim.n_subjects):
        bundle = build_subject_bundle(cfg, i)
        sid = bundle["subject"].subject_id
        ids.append(sid)
        formats.write_sequence(os.path.join(cfg.out_dir, f"{sid}.seq"),
                               bundle["seq"])
        formats.write_spamm(os.path.join(cfg.out_dir, f"{sid}.spamm"),
                            bundle["spamm"])
        formats.atomic_write(os.path.join(cfg.out_dir, f"{sid}.qc.txt"),
                             (bundle["qc"].to_text() + "\n").encode())
    manifest = {"subjects": ids, "train": ids[:cfg.sim.n_train],
                "eval": ids[cfg.sim.n_train:],
                "config": config_to_dict(cfg)}
    formats.atomic_write(os.path.join(cfg.out_dir, "manifest.json"),
                         json.dumps(manifest, sort_keys=True,
                                    indent=1).encode() + b"\n")
    return manifest


def read_manifest(out_dir: str) -> dict:
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no manifest at {path}; run simulate first") \
            from None


def _load_pair(out_dir: str, sid: str):
    seq = formats.read_sequence(os.path.join(out_dir, f"{sid}.seq"))
    spamm = formats.read_spamm(os.path.join(out_dir, f"{sid}.spamm"))
    return seq, spamm


def load_training_set(cfg: RunConfig, manifest: dict) -> list:
    subs = []
    for sid in manifest["train"]:
        seq, spamm = _load_pair(cfg.out_dir, sid)
        subs.append(training.prepare_subject(seq, spamm, cfg.n_s))
    return subs


def load_eval_set(cfg: RunConfig, manifest: dict) -> list:
    items = []
    for sid in manifest["eval"]:
        seq, spamm = _load_pair(cfg.out_dir, sid)
        items.append((seq.even_layers(), spamm))
    return items


def run_train(cfg: RunConfig, resume_path: str | None = None,
              max_epochs: int | None = None):
    """Train on the cohort's training split; write checkpoint and log CSV.

    ``resume_path`` continues an earlier partial run bit-identically (the
    config must keep the same epoch totals); ``max_epochs`` caps this
    invocation so such partial runs can be produced.
    """
    manifest = read_manifest(cfg.out_dir)
    subs = load_training_set(cfg, manifest)
    weights = adam = None
    done = (0, 0)
    if resume_path is not None:
        weights, adam, meta = formats.read_checkpoint(resume_path)
        done = tuple(meta.get("done", (0, 0)))
    weights, rows, adam = training.train(
        subs, cfg.network, cfg.train, cfg.seed,
        weights=weights, adam_state=adam, done=done, max_epochs=max_epochs)
    new_done = [done[0] + sum(r["stage"] == 1 for r in rows),
                done[1] + sum(r["stage"] == 2 for r in rows)]
    meta = {"seed": cfg.seed, "done": new_done}
    formats.write_checkpoint(os.path.join(cfg.out_dir, "checkpoint.ckpt"),
                             weights, adam, meta)
    log_path = os.path.join(cfg.out_dir, "train_log.csv")
    training.write_training_log(log_path, rows)
    return weights, rows


def run_recover(cfg: RunConfig, checkpoint_path: str, sid: str,
                out_path: str | None = None):
    """Recover one subject's cycle from its first-frame geometry and
    datapoints; writes the predicted sequence (recovery layers, mm)."""
    weights, _, _ = formats.read_checkpoint(checkpoint_path)
    truth, spamm = _load_pair(cfg.out_dir, sid)
    even = truth.even_layers()
    pred = recover.sequential_recover(weights, even.frame_grid(0), spamm,
                                      cfg.n_s, es_index=truth.es_index)
    pred.subject_id = sid
    if out_path is None:
        out_path = os.path.join(cfg.out_dir, f"{sid}.pred.seq")
    formats.write_sequence(out_path, pred)
    return pred


def run_eval(cfg: RunConfig, pred_path: str, truth_path: str,
             out_csv: str | None = None):
    """Score a predicted sequence file against a truth sequence file."""
    pred = formats.read_sequence(pred_path)
    truth = formats.read_sequence(truth_path)
    if truth.dims[2] != pred.dims[2]:
        truth = truth.even_layers()
    mae_mm, per_frame = recover.mae(pred, truth)
    si = recover.sequence_si(pred)
    report = recover.EvalReport(
        subject_id=pred.subject_id or "sequence",
        per_frame_err=per_frame, mae_mm=mae_mm,
        si_per_frame=si, si_mean=float(si.mean()),
        runtime_per_frame=np.zeros(pred.t_frames - 1), runtime_total=0.0)
    if out_csv is None:
        out_csv = os.path.join(cfg.out_dir, "eval.csv")
    text = recover.write_eval_csv([report], out_csv)
    return report, text


def run_ablate(cfg: RunConfig, out_csv: str | None = None):
    """Train and score every ablation cell on the cohort split."""
    manifest = read_manifest(cfg.out_dir)
    subs = load_training_set(cfg, manifest)
    eval_items = load_eval_set(cfg, manifest)
    ab = cfg.ablate
    tc = training.TrainConfig(
        e1=ab.e1, e2=ab.e2, lr=cfg.train.lr, lambda_d=cfg.train.lambda_d,
        lambda_s=cfg.train.lambda_s, window=cfg.train.window,
        msl_fractions=dict(cfg.train.msl_fractions))
    rows = recover.ablation_harness(
        subs, eval_items, cfg.network, tc, cfg.seed, cfg.n_s,
        ks=ab.ks, modes=ab.modes, cue_modes=ab.cue_modes,
        stage2_options=ab.stage2, emit_timing=cfg.emit_timing)
    if out_csv is None:
        out_csv = os.path.join(cfg.out_dir, "ablation.csv")
    recover.write_ablation_csv(rows, out_csv)
    return rows


def run_clip(cfg: RunConfig, seq_path: str, out_path: str):
    """Clip an existing sequence file against the configured plane set."""
    seq = formats.read_sequence(seq_path)
    planes = simulate.default_planes(seq.frame_grid(0), cfg.sim.n_sax,
                                     cfg.sim.n_lax)
    spamm = simulate.compute_spamm_sequence(seq, planes, n_s=cfg.n_s)
    formats.write_spamm(out_path, spamm)
    return spamm


def run_qc(seq_path: str, out_path: str | None = None):
    seq = formats.read_sequence(seq_path)
    report = simulate.quality_check(seq)
    if out_path is not None:
        formats.atomic_write(out_path, (report.to_text() + "\n").encode())
    return report


def run_export_mesh(seq_path: str, frame: int, layer: int | None,
                    out_path: str):
    from .geometry import build_layer_mesh
    seq = formats.read_sequence(seq_path)
    if not 0 <= frame < seq.t_frames:
        raise DataError(f"frame {frame} outside 0..{seq.t_frames - 1}")
    w = seq.dims[2] // 2 if layer is None else layer
    if not 0 <= w < seq.dims[2]:
        raise DataError(f"layer {w} outside 0..{seq.dims[2] - 1}")
    mesh = build_layer_mesh(seq.frame_grid(frame), w)
    formats.write_mesh_obj(out_path, mesh)
    return mesh
