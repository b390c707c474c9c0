"""Small builders shared across the test modules."""

import numpy as np

from tagtool.geometry import CoordinateGrid, ParameterFunctions, eval_model
from tagtool.network import NetworkConfig


def unit_quat(axis=None, angle=0.0):
    """Quaternion (w, x, y, z) rotating by ``angle`` about ``axis``."""
    if axis is None:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def wall_params(n_u=6, n_w=2, seed=None):
    """A plausible wall parameter set, optionally with seeded jitter."""
    a0 = np.linspace(32.0, 42.0, n_w) if n_w > 1 else np.array([36.0])
    ones = np.ones((n_u, n_w))
    pf = ParameterFunctions(
        a0=a0, a1=0.66 * ones, a2=0.62 * ones, a3=0.90 * ones,
        tau=np.zeros((n_u, n_w)), e_xo=np.zeros((n_u, n_w)),
        e_yo=np.zeros((n_u, n_w)), c=np.zeros(3), r=unit_quat())
    if seed is not None:
        rng = np.random.default_rng(seed)
        pf.a1 = np.clip(pf.a1 + 0.04 * rng.standard_normal((n_u, n_w)),
                        0.05, 0.95)
        pf.a2 = np.clip(pf.a2 + 0.04 * rng.standard_normal((n_u, n_w)),
                        0.05, 0.95)
        pf.tau = 0.08 * rng.standard_normal((n_u, n_w))
        pf.e_xo = 0.4 * rng.standard_normal((n_u, n_w))
        pf.e_yo = 0.4 * rng.standard_normal((n_u, n_w))
    return pf


def small_grid_model(n_u=6, n_v=8, n_w=2, seed=None):
    pf = wall_params(n_u=n_u, n_w=n_w, seed=seed)
    grid = CoordinateGrid(n_u, n_v, n_w)
    return pf, grid, eval_model(pf, grid)


def tiny_net_config(**kw):
    """A network small enough for finite-difference gradient checks."""
    base = dict(c_h=6, c_z=8, widths=(8, 10, 12), down_ratio=2, k_cross=4,
                k_self=4, n_up_neighbors=2, head_hidden=6, vel_hidden=(8,),
                flow_steps=2)
    base.update(kw)
    return NetworkConfig(**base)


def tiny_subject(seed=0, n_u=6, n_v=8, n_w=3, t_frames=8, n_sax=2, n_lax=1,
                 n_s=None):
    """One low-resolution subject: motion sequence plus clipped datapoints."""
    from tagtool import simulate
    subject = simulate.generate_subject(seed, n_u=n_u, n_v=n_v, n_cloud=60)
    seq = simulate.build_sequence(subject, n_w=n_w, t_frames=t_frames)
    planes = simulate.default_planes(seq.frame_grid(0), n_sax, n_lax)
    spamm = simulate.compute_spamm_sequence(seq, planes, n_s=n_s)
    return seq, spamm


def min_active_count(spamm):
    """Smallest number of active key pairs over all transitions."""
    return min(int(spamm.active_mask(q).sum())
               for q in range(spamm.t_frames - 1))


def randomize_weights(weights, seed, scale=0.05):
    """Perturb every tensor in place; wakes up the zero-initialized heads."""
    rng = np.random.default_rng(seed)
    for name in sorted(weights.tensors):
        arr = weights.tensors[name]
        weights.tensors[name] = arr + scale * rng.standard_normal(arr.shape)
    return weights


def random_cues(rng, n_sax=12, n_lax=8, spread=1.0, shift=0.05):
    from tagtool.network import ApparentMotionCues
    sax_q = spread * rng.standard_normal((n_sax, 3))
    lax_q = spread * rng.standard_normal((n_lax, 3))
    return ApparentMotionCues(
        sax_q=sax_q, sax_q1=sax_q + shift * rng.standard_normal((n_sax, 3)),
        lax_q=lax_q, lax_q1=lax_q + shift * rng.standard_normal((n_lax, 3)))
