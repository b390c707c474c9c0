"""Diffeomorphic point displacement by integrating a velocity field.

Local wall motion is modelled as the flow of a smooth, optionally
latent-conditioned velocity field over pseudo-time h in [0, 1]:

    dx/dh = v(x, h; z),    d = x(1) - x(0)

integrated with fixed-step classical RK4. The integrator is written against
plain arithmetic so it accepts either numpy arrays or autodiff Tensors; in
the traced case gradients flow through the unrolled steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalError
from .geometry import grid_edge_pairs


@dataclass
class FlowResult:
    """Outcome of one integration.

    ``displaced`` is defined as ``initial + q_d`` (held exactly, by
    construction), ``q_d`` being the local displacement accumulated over the
    integration. Both are Tensors when the integration was traced.
    """

    initial: object
    displaced: object
    q_d: object
    steps: int


def _check_velocity(v, pts_shape, step: int, stage: int):
    arr = ad.value(v)
    if arr.shape != pts_shape:
        raise DataError(
            f"velocity shape {arr.shape} != points shape {pts_shape} "
            f"at step {step}, stage {stage}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(
            f"non-finite velocity at integration step {step}, stage {stage}")


def integrate_flow(field, points, steps: int = 8, z=None,
                   h_span: tuple = (0.0, 1.0)) -> FlowResult:
    """Integrate ``dx/dh = field(x, h, z)`` over ``h_span`` with RK4.

    Parameters
    ----------
    field : callable ``(points, h, z) -> velocities`` with matching shape.
    points : (N, 3) start positions (ndarray or Tensor).
    steps : number of fixed RK4 steps (>= 1).
    z : optional per-point conditioning passed through to the field.
    h_span : integration interval; (0, 1) for the full flow.
    """
    if steps < 1:
        raise DataError(f"steps must be >= 1, got {steps}")
    h0, h1 = float(h_span[0]), float(h_span[1])
    shape = ad.value(points).shape
    if len(shape) != 2 or shape[1] != 3:
        raise DataError(f"points must be (N, 3), got {shape}")
    dt = (h1 - h0) / steps
    x = points
    for i in range(steps):
        h = h0 + i * dt
        k1 = field(x, h, z)
        _check_velocity(k1, shape, i, 1)
        k2 = field(x + (0.5 * dt) * k1, h + 0.5 * dt, z)
        _check_velocity(k2, shape, i, 2)
        k3 = field(x + (0.5 * dt) * k2, h + 0.5 * dt, z)
        _check_velocity(k3, shape, i, 3)
        k4 = field(x + dt * k3, h + dt, z)
        _check_velocity(k4, shape, i, 4)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    q_d = x - points
    return FlowResult(initial=points, displaced=points + q_d, q_d=q_d,
                      steps=steps)


def invert_flow(field, displaced, steps: int = 8, z=None) -> FlowResult:
    """Recover preimages under the flow by integrating the reversed field.

    Runs ``dx/dh' = -field(x, 1 - h', z)`` from the displaced points; the
    result's ``displaced`` attribute holds the recovered start positions.
    For smooth fields the forward-then-inverse round trip error is of the
    integrator's order, not exact.
    """
    def reversed_field(x, h, zz):
        return -1.0 * field(x, 1.0 - h, zz)

    return integrate_flow(reversed_field, displaced, steps=steps, z=z)


@lru_cache(maxsize=32)
def _edges(n_u: int, n_v: int, n_w: int) -> np.ndarray:
    return grid_edge_pairs(n_u, n_v, n_w)


def regularizer_terms(q_d, edges):
    """Displacement magnitude and lattice smoothness penalties.

    ``q_d`` is (N, 3) (ndarray or Tensor), ``edges`` an (E, 2) index array.
    Returns (l_d, l_s): the mean squared displacement norm, and the mean
    squared norm of forward differences along lattice edges.
    """
    l_d = ad.mean_(ad.sum_(q_d * q_d, axis=-1))
    diff = ad.take0(q_d, edges[:, 0]) - ad.take0(q_d, edges[:, 1])
    l_s = ad.mean_(ad.sum_(diff * diff, axis=-1))
    return l_d, l_s


def regularizers(q_d: np.ndarray, dims: tuple) -> tuple:
    """Numpy front end of :func:`regularizer_terms` for a full lattice.

    ``dims`` is (n_u, n_v, n_w) of the lattice the rows of ``q_d`` cover in
    (u, v, w)-major order; v differences wrap periodically.
    """
    n_u, n_v, n_w = (int(d) for d in dims)
    q = np.asarray(q_d, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] != n_u * n_v * n_w:
        raise DataError(
            f"q_d has {q.shape[0]} rows, lattice {dims} needs {n_u * n_v * n_w}")
    l_d, l_s = regularizer_terms(q, _edges(n_u, n_v, n_w))
    return float(ad.value(l_d)), float(ad.value(l_s))
