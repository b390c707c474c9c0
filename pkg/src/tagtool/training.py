"""Two-stage network training on clipped cohort transitions.

Stage I teaches single transitions with ground-truth inputs: each epoch
visits every subject once, picks a random consecutive frame pair, and takes
one optimizer step. Parameter groups unlock on a staged schedule so the
global deformation head settles before the finer ones. Stage II switches to
short rollouts: the network consumes its own (detached) predictions across a
window of frames, the per-transition losses are summed, and one step is
taken per window with every group live.

All positions here are in the per-subject normalized frame; conversion to
and from scanner mm lives with the evaluation code.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .flow import regularizer_terms
from .geometry import grid_edge_pairs
from .network import NetworkConfig, NetworkWeights, forward_psi, init_weights


def loss_mse(pred, target):
    """Mean squared Euclidean distance between paired point rows."""
    diff = pred - target
    return ad.mean_(ad.sum_(diff * diff, axis=-1))


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, name: str,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter array.

    Moment buffers live in ``state`` under ``name`` and are updated in place.
    """
    m, v, t = state.get(name, (np.zeros_like(param), np.zeros_like(param), 0))
    b1, b2 = betas
    t += 1
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    state[name] = (m, v, t)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def msl_schedule(step: int, total: int, fractions: dict) -> dict:
    """Which parameter groups are live at a training step.

    A group with fraction f is live once ``step >= f * total``; fraction 0
    means live from the start.
    """
    return {g: step >= f * total for g, f in fractions.items()}


def default_msl_fractions() -> dict:
    return {"backbone": 0.0, "scale": 0.0, "twist": 0.3, "local": 0.5}


@dataclass
class TrainConfig:
    """Optimization settings shared by both stages."""

    e1: int = 200
    e2: int = 50
    lr: float = 1e-3
    lambda_d: float = 0.1
    lambda_s: float = 0.05
    window: int = 5                     # frames per Stage II rollout
    msl_fractions: dict = field(default_factory=default_msl_fractions)

    def validate(self):
        if self.e1 < 0 or self.e2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.window < 2:
            raise ConfigError("rollout window needs at least 2 frames")


@dataclass
class TrainingSubject:
    """One subject's normalized training material.

    ``frames`` is (T, N_m, 3) over the recovery (even) layers; ``cues[q]``
    holds the normalized datapoint pairs of transition q; ``norm`` maps back
    to mm.
    """

    subject_id: str
    frames: np.ndarray
    cues: list
    dims: tuple
    norm: object = None

    @property
    def t_frames(self) -> int:
        return self.frames.shape[0]


def prepare_subject(seq, spamm, n_s: int) -> TrainingSubject:
    """Normalize a subject's motion sequence and cue pairs for training.

    The normalization frame comes from the subject's first recovery-layer
    frame; the same affine map is applied to every frame and cue array.
    """
    from .recover import compute_norm, apply_norm
    ev = seq.even_layers()
    t_frames = ev.t_frames
    frames = ev.frames.reshape(t_frames, -1, 3)
    norm = compute_norm(frames[0])
    frames_n = np.stack([apply_norm(norm, fr) for fr in frames])
    cues = []
    for q in range(t_frames - 1):
        c = spamm.cues(q, n_s)
        cues.append(type(c)(
            sax_q=apply_norm(norm, c.sax_q), sax_q1=apply_norm(norm, c.sax_q1),
            lax_q=apply_norm(norm, c.lax_q), lax_q1=apply_norm(norm, c.lax_q1)))
    return TrainingSubject(subject_id=seq.subject_id, frames=frames_n,
                           cues=cues, dims=ev.dims, norm=norm)


def _rollout_step(weights: NetworkWeights, sub: TrainingSubject, q0: int,
                  n_trans: int, frozen_groups: set, tc: TrainConfig,
                  adam_state: dict, stage: int, epoch: int, hook=None):
    """Forward ``n_trans`` consecutive transitions on one tape, sum the
    losses, and take one optimizer step. Inputs after the first transition
    are the previous predictions, detached from the tape."""
    tape = ad.Tape()
    params = weights.bind(tape)
    frozen_ids = [params[n].id for n, g in weights.groups.items()
                  if g in frozen_groups]
    edges = grid_edge_pairs(*sub.dims)
    inp = sub.frames[q0]
    terms = []
    stats = np.zeros(3)                 # data, l_d, l_s sums
    for k in range(n_trans):
        q = q0 + k
        if hook is not None and stage == 2:
            hook({"stage": stage, "epoch": epoch, "subject_id": sub.subject_id,
                  "q": q, "input": inp.copy(),
                  "source": "truth" if k == 0 else "prediction"})
        m_hat, _, q_d = forward_psi(weights, inp, sub.cues[q], sub.dims,
                                    params=params)
        data = loss_mse(m_hat, sub.frames[q + 1])
        l_d, l_s = regularizer_terms(q_d, edges)
        terms.append(data + tc.lambda_d * l_d + tc.lambda_s * l_s)
        stats += [float(ad.value(data)), float(ad.value(l_d)),
                  float(ad.value(l_s))]
        inp = ad.value(m_hat).copy()
        if hook is not None and stage == 2:
            hook({"stage": stage, "epoch": epoch, "subject_id": sub.subject_id,
                  "q": q, "output": inp.copy()})
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    loss_val = float(ad.value(loss))
    where = (f"stage {stage}, epoch {epoch}, subject {sub.subject_id}, "
             f"transitions {q0}..{q0 + n_trans - 1}")
    if not np.isfinite(loss_val):
        raise NumericalError(f"non-finite loss at {where}")
    grads = ad.backward(tape, loss, frozen_ids=frozen_ids)
    for name, tensor in params.items():
        if weights.groups[name] in frozen_groups:
            continue
        g = grads.get(tensor.id)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in '{name}' at {where}")
        weights.tensors[name] = adam_step(weights.tensors[name], g,
                                          adam_state, name, tc.lr)
    return loss_val, stats / n_trans


def train(subjects: list, net_cfg: NetworkConfig, tc: TrainConfig, seed: int,
          weights: NetworkWeights | None = None, hook=None,
          adam_state: dict | None = None, done: tuple = (0, 0),
          max_epochs: int | None = None):
    """Run both training stages and return (weights, log_rows, adam_state).

    Deterministic for fixed inputs: every random choice draws from a stream
    keyed by (seed, stage, epoch, subject index), so the schedule does not
    depend on how the run is split. ``done`` = (stage I epochs already run,
    stage II epochs already run) supports resuming: passing the weights and
    optimizer state of an interrupted run continues it bit-identically.
    ``max_epochs`` caps how many epochs this call executes (the unlock
    schedule still follows the configured totals), which is how partial runs
    for later resumption are produced. With zero epochs in both stages the
    freshly initialized weights and an empty log come back.
    """
    tc.validate()
    if not subjects:
        raise ConfigError("no training subjects")
    if weights is None:
        weights = init_weights(net_cfg, seed)
    if adam_state is None:
        adam_state = {}
    rows = []
    budget = math.inf if max_epochs is None else max_epochs

    for epoch in range(done[0], tc.e1):
        if len(rows) >= budget:
            return weights, rows, adam_state
        live = msl_schedule(epoch, tc.e1, tc.msl_fractions)
        frozen = {g for g, ok in live.items() if not ok}
        tot = np.zeros(4)
        for si, sub in enumerate(subjects):
            rng = np.random.default_rng((seed, 1, epoch, si))
            q = int(rng.integers(0, sub.t_frames - 1))
            loss_val, stats = _rollout_step(weights, sub, q, 1, frozen, tc,
                                            adam_state, 1, epoch, hook)
            tot += [loss_val, *stats]
        tot /= len(subjects)
        rows.append({"stage": 1, "epoch": epoch, "loss": tot[0],
                     "data": tot[1], "l_d": tot[2], "l_s": tot[3]})

    for epoch in range(done[1], tc.e2):
        if len(rows) >= budget:
            return weights, rows, adam_state
        tot = np.zeros(4)
        for si, sub in enumerate(subjects):
            if sub.t_frames < tc.window:
                raise ConfigError(
                    f"subject {sub.subject_id} has {sub.t_frames} frames, "
                    f"shorter than the rollout window {tc.window}")
            rng = np.random.default_rng((seed, 2, epoch, si))
            q0 = int(rng.integers(0, sub.t_frames - tc.window + 1))
            loss_val, stats = _rollout_step(weights, sub, q0, tc.window - 1,
                                            set(), tc, adam_state, 2, epoch,
                                            hook)
            tot += [loss_val, *stats]
        tot /= len(subjects)
        rows.append({"stage": 2, "epoch": epoch, "loss": tot[0],
                     "data": tot[1], "l_d": tot[2], "l_s": tot[3]})

    return weights, rows, adam_state


LOG_FIELDS = ("stage", "epoch", "loss", "data", "l_d", "l_s")


def write_training_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})


def read_training_log(path) -> list:
    with open(path, newline="") as fh:
        rdr = csv.DictReader(fh)
        rows = []
        for r in rdr:
            rows.append({"stage": int(r["stage"]), "epoch": int(r["epoch"]),
                         "loss": float(r["loss"]), "data": float(r["data"]),
                         "l_d": float(r["l_d"]), "l_s": float(r["l_s"])})
        return rows
