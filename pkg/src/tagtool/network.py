"""Hybrid point transformer for frame-to-frame wall motion recovery.

One forward pass maps (material points of the current frame, sparse apparent
motion cues between this frame and the next) to the predicted next-frame
points together with the deformation step that produced them. The pipeline:

  1. cross attention per imaging view lifts sparse cue pairs into a dense
     per-material-point hint field,
  2. a U-shaped self-attention backbone (farthest-point downsampling with
     local max pooling, inverse-distance upsampling with skip connections)
     turns hints into a per-point latent motion code,
  3. a global head pools the code over each v ring and predicts per-(u, w)
     multiplicative axis scales and an additive twist,
  4. a conditional velocity field, integrated by the point flow, adds the
     local displacement on top of the globally deformed points.

Vector attention follows the subtraction relation
``Y_i = sum_j rho(gamma(phi(Q_i) - psi(K_j) + delta_ij)) * (alpha(V_j) + delta_ij)``
with ``rho`` a per-channel softmax over the neighbor axis and ``delta`` a
two-layer MLP on relative positions. No normalization layers anywhere; the
nonlinearity is SiLU so that every path stays smooth for gradient checks.

All functions accept either plain float64 arrays (inference) or tape-bound
Tensors (training); outputs match the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .flow import integrate_flow
from .geometry import ring_index_map

MODES = ("full", "global_only", "local_only")
CUE_MODES = ("mixed", "separated")


@dataclass
class NetworkConfig:
    """Architecture and ablation switches. Defaults are the desk-scale stack."""

    c_h: int = 32                    # fused hint width
    c_z: int = 64                    # latent motion code width
    widths: tuple = (32, 64, 128)    # backbone stage widths, fine to coarse
    down_ratio: int = 4              # FPS keep ratio per transition-down
    k_cross: int = 16                # cue neighbors per material point
    k_self: int = 16                 # neighbors inside backbone attention
    n_up_neighbors: int = 3          # inverse-distance interpolation stencil
    head_hidden: int = 32
    vel_hidden: tuple = (64, 64)
    flow_steps: int = 8
    mode: str = "full"               # full | global_only | local_only
    cue_mode: str = "mixed"          # mixed | separated
    value_displacement: bool = True  # values carry S(t_{q+1}) - S(t_q) instead
    value_gain: float = 16.0         # pre-scales displacement values to ~unit size

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cue_mode not in CUE_MODES:
            raise ConfigError(
                f"cue_mode must be one of {CUE_MODES}, got {self.cue_mode!r}")
        for name in ("c_h", "c_z", "head_hidden", "flow_steps", "k_cross",
                     "k_self", "n_up_neighbors"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.down_ratio < 2:
            raise ConfigError("down_ratio must be >= 2")
        if len(self.widths) != 3:
            raise ConfigError("widths must list the three stage widths")
        if self.value_gain <= 0:
            raise ConfigError("value_gain must be positive")


@dataclass
class ApparentMotionCues:
    """Index-aligned cue pairs per view: row i of ``*_q`` moves to row i of ``*_q1``."""

    sax_q: np.ndarray
    sax_q1: np.ndarray
    lax_q: np.ndarray
    lax_q1: np.ndarray

    def validate(self):
        for name in ("sax", "lax"):
            a = getattr(self, f"{name}_q")
            b = getattr(self, f"{name}_q1")
            if a.ndim != 2 or a.shape[1] != 3 or a.shape != b.shape:
                raise DataError(f"{name} cue arrays must be matching (N, 3)")
            if a.shape[0] == 0:
                raise DataError(f"empty {name} cue list")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise DataError(f"non-finite {name} cues")

    @property
    def counts(self) -> tuple:
        return self.sax_q.shape[0], self.lax_q.shape[0]


@dataclass
class GlobalStep:
    """Per-(u, w) ring deformation: axis scales ``a`` (R, 3) and twist ``tau`` (R,)."""

    a: object
    tau: object

    def validate(self):
        a, tau = ad.value(self.a), ad.value(self.tau)
        if a.ndim != 2 or a.shape[1] != 3 or tau.shape != (a.shape[0],):
            raise DataError("GlobalStep shapes must be (R, 3) and (R,)")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(tau))):
            raise DataError("non-finite global step")
        if np.any(a <= 0):
            raise DataError("axis scales must be positive")


@dataclass
class NetworkWeights:
    """Named parameter tensors plus their MSL group assignment.

    Groups: 'scale' and 'twist' are the two halves of the global head's final
    layer, 'local' is the velocity MLP, everything else is 'backbone'.
    ``unlock`` tracks which groups are currently live; the trainer rewrites it
    from the unlock schedule each epoch.
    """

    tensors: dict
    groups: dict
    config: NetworkConfig
    unlock: dict = field(default_factory=lambda: {
        "backbone": True, "scale": True, "twist": True, "local": True})

    def bind(self, tape) -> dict:
        """Wrap every tensor as a tape leaf; returns name -> Tensor."""
        return {name: Tensor(arr, tape) for name, arr in self.tensors.items()}

    def copy(self) -> "NetworkWeights":
        return NetworkWeights({k: v.copy() for k, v in self.tensors.items()},
                              dict(self.groups), replace(self.config),
                              dict(self.unlock))


def _group_of(name: str) -> str:
    if name.startswith("head.scale"):
        return "scale"
    if name.startswith("head.twist"):
        return "twist"
    if name.startswith("vel."):
        return "local"
    return "backbone"


def _attention_specs(prefix: str, c: int, with_residual: bool):
    specs = []
    if with_residual:
        specs.append((f"{prefix}.fc1", c, c, "uniform"))
    for role in ("phi", "psi", "alpha"):
        specs.append((f"{prefix}.{role}", c, c, "uniform"))
    specs += [(f"{prefix}.gamma1", c, c, "uniform"),
              (f"{prefix}.gamma2", c, c, "uniform"),
              (f"{prefix}.delta1", 3, c, "uniform"),
              (f"{prefix}.delta2", c, c, "uniform")]
    if with_residual:
        specs.append((f"{prefix}.fc2", c, c, "uniform"))
    return specs


def _layer_specs(cfg: NetworkConfig):
    """Full inventory of linear layers as (name, c_in, c_out, init)."""
    w0, w1, w2 = cfg.widths
    specs = []
    for view in ("sax", "lax"):
        specs += [(f"cross.{view}.q_lift", 3, cfg.c_h, "uniform"),
                  (f"cross.{view}.k_lift", 3, cfg.c_h, "uniform"),
                  (f"cross.{view}.v_lift", 3, cfg.c_h, "uniform")]
        specs += _attention_specs(f"cross.{view}.att", cfg.c_h, False)
    specs += [("fuse.l1", 2 * cfg.c_h, cfg.c_h, "uniform"),
              ("fuse.l2", cfg.c_h, cfg.c_h, "uniform")]
    specs.append(("enc.lift", cfg.c_h, w0, "uniform"))
    specs += _attention_specs("enc.block", w0, True)
    specs.append(("down1.proj", w0, w1, "uniform"))
    specs += _attention_specs("down1.block", w1, True)
    specs.append(("down2.proj", w1, w2, "uniform"))
    specs += _attention_specs("down2.block", w2, True)
    specs += [("up1.coarse", w2, w1, "uniform"), ("up1.skip", w1, w1, "uniform")]
    specs += _attention_specs("up1.block", w1, True)
    specs += [("up2.coarse", w1, w0, "uniform"), ("up2.skip", w0, w0, "uniform")]
    specs += _attention_specs("up2.block", w0, True)
    specs.append(("out.z", w0, cfg.c_z, "uniform"))
    specs += [("head.trunk", cfg.c_z, cfg.head_hidden, "uniform"),
              ("head.scale", cfg.head_hidden, 3, "zero"),
              ("head.twist", cfg.head_hidden, 1, "zero")]
    dims = (3 + cfg.c_z + 1,) + tuple(cfg.vel_hidden)
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        specs.append((f"vel.l{i + 1}", din, dout, "uniform"))
    specs.append((f"vel.l{len(dims)}", dims[-1], 3, "zero"))
    return specs


def init_weights(cfg: NetworkConfig, seed: int) -> NetworkWeights:
    """Deterministic initialization; the two head layers and the last velocity
    layer start at zero so the whole network is the identity map."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors, groups = {}, {}
    for name, c_in, c_out, kind in _layer_specs(cfg):
        if kind == "zero":
            w = np.zeros((c_in, c_out))
            b = np.zeros(c_out)
        else:
            bound = 1.0 / math.sqrt(c_in)
            w = rng.uniform(-bound, bound, size=(c_in, c_out))
            b = rng.uniform(-bound, bound, size=c_out)
        tensors[f"{name}.w"] = w
        tensors[f"{name}.b"] = b
        groups[f"{name}.w"] = groups[f"{name}.b"] = _group_of(name)
    return NetworkWeights(tensors=tensors, groups=groups, config=replace(cfg))


# ---------------------------------------------------------------------------
# point-set utilities


def knn(queries: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest keys per query; distance ties break to the
    lower key index."""
    queries = np.asarray(ad.value(queries))
    keys = np.asarray(ad.value(keys))
    if k < 1 or k > keys.shape[0]:
        raise DataError(f"k={k} out of range for {keys.shape[0]} keys")
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    block = max(1, int(4e6) // max(keys.shape[0], 1))
    for lo in range(0, queries.shape[0], block):
        q = queries[lo:lo + block]
        d2 = ((q[:, None, :] - keys[None, :, :]) ** 2).sum(axis=-1)
        out[lo:lo + block] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of size n, seeded at ``start``.

    Distance ties resolve to the lowest index (numpy argmax convention), so
    the selection is fully deterministic.
    """
    pts = np.asarray(ad.value(points))
    if n < 1 or n > pts.shape[0]:
        raise DataError(f"cannot sample {n} of {pts.shape[0]} points")
    sel = np.empty(n, dtype=np.int64)
    sel[0] = start
    d2 = ((pts - pts[start]) ** 2).sum(axis=-1)
    for i in range(1, n):
        nxt = int(np.argmax(d2))
        sel[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=-1))
    return sel


def _interp_weights(fine: np.ndarray, coarse: np.ndarray, k: int):
    """Inverse-distance interpolation stencil of ``fine`` against ``coarse``."""
    idx = knn(fine, coarse, min(k, coarse.shape[0]))
    d = np.sqrt(((fine[:, None, :] - coarse[idx]) ** 2).sum(axis=-1))
    w = 1.0 / np.maximum(d, 1e-12)
    return idx, w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# attention


def vector_attention(q_feat, k_feats, v_feats, rel_pos, weights: dict):
    """Subtraction-relation vector attention over a fixed neighbor set.

    Shapes: ``q_feat`` (N, C); ``k_feats``, ``v_feats`` (N, k, C); ``rel_pos``
    (N, k, 3). ``weights`` holds the layer's phi/psi/alpha/gamma/delta
    parameters under ``<prefix>.w`` / ``<prefix>.b`` keys.
    """
    def lin(name, x):
        return ad.linear(x, weights[f"{name}.w"], weights[f"{name}.b"])

    delta = lin("delta2", ad.silu(lin("delta1", rel_pos)))     # (N, k, C)
    qp = lin("phi", q_feat)
    n, c = ad.value(qp).shape
    pre = ad.reshape(qp, (n, 1, c)) - lin("psi", k_feats) + delta
    logits = lin("gamma2", ad.silu(lin("gamma1", pre)))
    attn = ad.softmax(logits, axis=1)                          # per-channel over k
    return ad.sum_(attn * (lin("alpha", v_feats) + delta), axis=1)


def _sub_weights(params: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _attention_block(params, prefix, feats, pos, idx):
    """Point-transformer style residual block; q = k = v = the stage's points."""
    def lin(name, x):
        return ad.linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])

    inner = lin("fc1", feats)
    gathered = ad.take0(inner, idx)
    rel = pos[:, None, :] - pos[idx]
    y = vector_attention(inner, gathered, gathered, rel,
                         _sub_weights(params, prefix))
    return feats + lin("fc2", y)


def _masked_values(arr: np.ndarray, view: str, cue_mode: str) -> np.ndarray:
    if cue_mode == "mixed":
        return arr
    out = arr.copy()
    if view == "sax":
        out[:, 2] = 0.0     # in-plane information only
    else:
        out[:, :2] = 0.0    # longitudinal information only
    return out


def cross_attention_fuse(params, material_points: np.ndarray,
                         cues: ApparentMotionCues, cfg: NetworkConfig):
    """Dense per-material-point hints from sparse cue pairs, one view at a time."""
    cues.validate()
    outputs = []
    for view in ("sax", "lax"):
        s_q = np.asarray(getattr(cues, f"{view}_q"), dtype=np.float64)
        s_q1 = np.asarray(getattr(cues, f"{view}_q1"), dtype=np.float64)
        if cfg.k_cross > s_q.shape[0]:
            raise DataError(
                f"k_cross={cfg.k_cross} exceeds {view} cue count {s_q.shape[0]}")
        if cfg.value_displacement:
            # Per-transition displacements are tiny next to the positional
            # encodings; without the gain the value pathway starts out
            # swamped and short training budgets never recover it.
            val = cfg.value_gain * (s_q1 - s_q)
        else:
            val = s_q1
        val = _masked_values(val, view, cfg.cue_mode)
        idx = knn(material_points, s_q, cfg.k_cross)

        def lin(name, x, _v=view):
            return ad.linear(x, params[f"cross.{_v}.{name}.w"],
                             params[f"cross.{_v}.{name}.b"])

        q_feat = lin("q_lift", material_points)
        k_all = lin("k_lift", s_q)
        v_all = lin("v_lift", val)
        rel = material_points[:, None, :] - s_q[idx]
        y = vector_attention(q_feat, ad.take0(k_all, idx), ad.take0(v_all, idx),
                             rel, _sub_weights(params, f"cross.{view}.att"))
        outputs.append(y)
    fused = ad.concat(outputs, axis=-1)
    h = ad.silu(ad.linear(fused, params["fuse.l1.w"], params["fuse.l1.b"]))
    return ad.linear(h, params["fuse.l2.w"], params["fuse.l2.b"])


def self_attention_backbone(params, hints, material_points: np.ndarray,
                            cfg: NetworkConfig):
    """U-shaped encoder-decoder over the material point cloud; returns the
    per-point latent motion code z (N_m, c_z)."""
    pos0 = np.asarray(material_points, dtype=np.float64)
    n0 = pos0.shape[0]
    n1 = -(-n0 // cfg.down_ratio)       # ceil division
    n2 = -(-n1 // cfg.down_ratio)
    if n2 < cfg.k_self:
        raise ConfigError(
            f"coarsest stage has {n2} points, fewer than k_self={cfg.k_self}")

    def down(feats, pos, n_keep, proj_name):
        keep = farthest_point_sample(pos, n_keep)
        sub = pos[keep]
        nb = knn(sub, pos, cfg.k_self)
        projected = ad.silu(ad.linear(feats, params[f"{proj_name}.w"],
                                      params[f"{proj_name}.b"]))
        pooled = ad.max_(ad.take0(projected, nb), axis=1)
        return pooled, sub

    def up(coarse_feats, coarse_pos, fine_feats, fine_pos, name):
        idx, w = _interp_weights(fine_pos, coarse_pos, cfg.n_up_neighbors)
        gathered = ad.take0(coarse_feats, idx)          # (Nf, 3, C)
        interp = ad.sum_(gathered * w[:, :, None], axis=1)
        lifted = ad.linear(interp, params[f"{name}.coarse.w"],
                           params[f"{name}.coarse.b"])
        skip = ad.linear(fine_feats, params[f"{name}.skip.w"],
                         params[f"{name}.skip.b"])
        return lifted + skip

    idx0 = knn(pos0, pos0, cfg.k_self)
    f0 = ad.linear(hints, params["enc.lift.w"], params["enc.lift.b"])
    f0 = _attention_block(params, "enc.block", f0, pos0, idx0)

    f1, pos1 = down(f0, pos0, n1, "down1.proj")
    idx1 = knn(pos1, pos1, cfg.k_self)
    f1 = _attention_block(params, "down1.block", f1, pos1, idx1)

    f2, pos2 = down(f1, pos1, n2, "down2.proj")
    idx2 = knn(pos2, pos2, cfg.k_self)
    f2 = _attention_block(params, "down2.block", f2, pos2, idx2)

    u1 = up(f2, pos2, f1, pos1, "up1")
    u1 = _attention_block(params, "up1.block", u1, pos1, idx1)

    u0 = up(u1, pos1, f0, pos0, "up2")
    u0 = _attention_block(params, "up2.block", u0, pos0, idx0)

    return ad.linear(u0, params["out.z.w"], params["out.z.b"])


# ---------------------------------------------------------------------------
# heads


def predict_global(params, z, dims: tuple) -> GlobalStep:
    """Ring-pooled global deformation: exp-parameterized scales, raw twist."""
    n_u, n_v, n_w = dims
    n, c = ad.value(z).shape
    if n != n_u * n_v * n_w:
        raise DataError(f"latent rows {n} do not factor as {dims}")
    pooled = ad.mean_(ad.reshape(z, (n_u, n_v, n_w, c)), axis=1)
    pooled = ad.reshape(pooled, (n_u * n_w, c))
    t = ad.silu(ad.linear(pooled, params["head.trunk.w"], params["head.trunk.b"]))
    delta = ad.linear(t, params["head.scale.w"], params["head.scale.b"])
    tau = ad.linear(t, params["head.twist.w"], params["head.twist.b"])
    return GlobalStep(a=ad.exp(delta), tau=ad.reshape(tau, (n_u * n_w,)))


def _apply_global_ops(points, gstep: GlobalStep, ring_map: np.ndarray):
    """Scale-then-rotate each ring; works on arrays or Tensors."""
    a_pt = ad.take0(gstep.a, ring_map)
    tau_pt = ad.take0(gstep.tau, ring_map)
    ct, st = ad.cos(tau_pt), ad.sin(tau_pt)
    x, y, zc = ad.col(points, 0), ad.col(points, 1), ad.col(points, 2)
    ax = ad.col(a_pt, 0) * x
    ay = ad.col(a_pt, 1) * y
    n = ad.value(x).shape[0]
    cols = [ct * ax - st * ay, st * ax + ct * ay, ad.col(a_pt, 2) * zc]
    return ad.concat([ad.reshape(cc, (n, 1)) for cc in cols], axis=1)


def apply_global(mg, gstep: GlobalStep):
    """Apply a global step to an evaluated grid (or flat (N, 3) array).

    Per (u, w) ring: p' = Rot_z(tau) @ diag(a1, a2, a3) @ p. An identity step
    returns the input bit-exact.
    """
    from .geometry import MaterialGrid  # local import to avoid cycle at load
    gstep.validate()
    a, tau = ad.value(gstep.a), ad.value(gstep.tau)
    if isinstance(mg, MaterialGrid):
        g = mg.grid
        if a.shape[0] != g.n_u * g.n_w:
            raise DataError(
                f"global step has {a.shape[0]} rings, grid needs {g.n_u * g.n_w}")
        rmap = ring_index_map(g.n_u, g.n_v, g.n_w)
        flat = mg.flat
    else:
        flat = np.asarray(mg, dtype=np.float64).reshape(-1, 3)
        if a.shape[0] != flat.shape[0]:
            raise DataError("flat apply_global needs one (a, tau) row per point")
        rmap = np.arange(flat.shape[0])
    if np.all(a == 1.0) and np.all(tau == 0.0):
        out = flat.copy()
    else:
        out = ad.value(_apply_global_ops(flat, GlobalStep(a, tau), rmap))
    if isinstance(mg, MaterialGrid):
        return MaterialGrid(grid=mg.grid, points=out.reshape(mg.points.shape))
    return out


def forward_psi(weights, points: np.ndarray, cues: ApparentMotionCues,
                dims: tuple, params: dict | None = None):
    """Full network forward pass on one frame transition.

    Parameters
    ----------
    weights : NetworkWeights (provides config and, if ``params`` is None,
        the parameter arrays).
    points : (N_m, 3) normalized material points, (u, v, w)-major over ``dims``.
    cues : normalized apparent-motion cue pairs.
    dims : (n_u, n_v, n_w) factorization of the material lattice.
    params : optional tape-bound tensors from ``weights.bind(tape)``; when
        given, outputs are Tensors and gradients flow.

    Returns
    -------
    (m_hat, gstep, q_d): predicted points, the global step, and the local
    displacement, satisfying ``m_hat = apply_global(points) + q_d``.
    """
    cfg = weights.config
    cfg.validate()
    p = params if params is not None else weights.tensors
    pts = np.asarray(points, dtype=np.float64)
    n_u, n_v, n_w = dims
    if pts.shape != (n_u * n_v * n_w, 3):
        raise DataError(f"points shape {pts.shape} does not match dims {dims}")

    hints = cross_attention_fuse(p, pts, cues, cfg)
    z = self_attention_backbone(p, hints, pts, cfg)

    rmap = ring_index_map(n_u, n_v, n_w)
    if cfg.mode == "local_only":
        gstep = GlobalStep(a=np.ones((n_u * n_w, 3)), tau=np.zeros(n_u * n_w))
        m_prime = ad.as_tensor(pts)
    else:
        gstep = predict_global(p, z, dims)
        m_prime = _apply_global_ops(pts, gstep, rmap)

    if cfg.mode == "global_only":
        q_d = ad.as_tensor(np.zeros_like(pts))
        m_hat = m_prime
    else:
        def field(x, h, zz):
            col_h = np.full((pts.shape[0], 1), h)
            inp = ad.concat([x, zz, ad.as_tensor(col_h)], axis=-1)
            for i in range(len(cfg.vel_hidden)):
                inp = ad.silu(ad.linear(inp, p[f"vel.l{i + 1}.w"],
                                        p[f"vel.l{i + 1}.b"]))
            last = len(cfg.vel_hidden) + 1
            return ad.linear(inp, p[f"vel.l{last}.w"], p[f"vel.l{last}.b"])

        res = integrate_flow(field, m_prime, steps=cfg.flow_steps, z=z)
        q_d, m_hat = res.q_d, res.displaced

    if params is None:
        return ad.value(m_hat), GlobalStep(ad.value(gstep.a), ad.value(gstep.tau)), \
            ad.value(q_d)
    return m_hat, gstep, q_d
