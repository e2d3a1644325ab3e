"""Huber-smoothed Euclidean norm and its semismooth derivative kernels.

The smoothing writes the norm as ||g|| - 1/(2*gamma) outside the ball
||g|| >= 1/gamma and as the quadratic (gamma/2)*||g||^2 inside, which makes
value and gradient continuous across the kink. gamma = inf recovers the
exact norm. Two subgradient kernels coexist on purpose: ``hgamma`` is the
max-form kernel the Newton solvers differentiate, ``hgamma_smooth`` the C^1
three-branch variant used where a continuously differentiable density is
wanted. Both coincide outside a band of width 1/(2*gamma^2) around the kink.

Field functions take components stacked on the leading axis, shape (m, ...),
and act pixelwise on the trailing axes.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

# guard for divisions by pixel norms; values at or below this are treated
# as the degenerate smooth branch
EPS_NORM = 1e-30


def _norms(z: Array) -> Array:
    return np.sqrt(np.sum(np.square(z), axis=0))


def huber(z: Array, gamma: float) -> Array:
    """Pointwise Huber norm of a stacked field, shape z[1:]."""
    n = _norms(z)
    if not np.isfinite(gamma):
        return n
    return np.where(n >= 1.0 / gamma, n - 0.5 / gamma, 0.5 * gamma * n * n)


def hgamma(z: Array, gamma: float) -> Array:
    """Max-form kernel z / max(1/gamma, ||z||); unit ball valued."""
    n = _norms(z)
    if np.isfinite(gamma):
        den = np.maximum(1.0 / gamma, n)
    else:
        den = np.maximum(n, EPS_NORM)
    return z / den


def hgamma_smooth(z: Array, gamma: float) -> Array:
    """C^1 three-branch kernel; agrees with hgamma away from the kink.

    With t = gamma*||z|| - 1: the kernel is z/||z|| for t >= 1/(2*gamma),
    gamma*z for t <= -1/(2*gamma), and in between the direction z/||z||
    scaled by 1 - (gamma/2)*(1 - gamma*||z|| + 1/(2*gamma))^2.
    """
    n = _norms(z)
    if not np.isfinite(gamma):
        return z / np.maximum(n, EPS_NORM)
    half_band = 0.5 / gamma
    t = gamma * n - 1.0
    nsafe = np.maximum(n, EPS_NORM)
    unit = z / nsafe
    w = 1.0 - 0.5 * gamma * np.square(1.0 - gamma * n + half_band)
    out = np.where(t >= half_band, unit,
                   np.where(t <= -half_band, gamma * z, w * unit))
    return out


def huber_grad(z: Array, gamma: float) -> Array:
    """Gradient of the Huber value w.r.t. z (equals the max-form kernel)."""
    return hgamma(z, gamma)


def newton_blocks(z: Array, q: Array, alpha: float, gamma: float,
                  modified: bool = True) -> Array:
    """Pixelwise m x m derivative blocks of the max-form kernel.

    On the active set gamma*||z|| > 1 the unmodified block is
    I/||z|| - (z outer z)/||z||^3; the modified block replaces the left
    factor z/||z||^3 by (q/max(||q||, alpha)) * (1/||z||^2), which bounds
    the rank-one part while the dual iterate q is still infeasible. On the
    inactive set both equal gamma*I (this covers ||z|| = 0).

    Returns shape (m, m) + z.shape[1:]. alpha may be a scalar or a pixel
    array, >= 0 either way; gamma must be finite. q is ignored when
    modified is False.
    """
    if not np.isfinite(gamma):
        raise ValueError("Newton blocks need a finite huber parameter")
    alpha = np.asarray(alpha, dtype=float)
    if not np.all(alpha >= 0):
        raise ValueError("Newton blocks need nonnegative weights")
    m = z.shape[0]
    n = _norms(z)
    active = gamma * n > 1.0
    nsafe = np.maximum(n, EPS_NORM)
    scale = np.where(active, 1.0 / nsafe, gamma)  # min(1, gamma*||z||)/||z||
    if modified:
        qn = np.maximum(_norms(q), np.maximum(alpha, EPS_NORM))
        left = q / qn
    else:
        left = z / nsafe
    right = z / np.square(nsafe)
    out = np.empty((m, m) + z.shape[1:])
    for a in range(m):
        for b in range(m):
            rank1 = np.where(active, left[a] * right[b], 0.0)
            out[a, b] = (scale if a == b else 0.0) - rank1
    return out


# Pointwise wrappers with the result shapes the rest of the API documents.

def huber_value(g, gamma: float) -> float:
    """Huber norm of a single vector."""
    return float(huber(np.asarray(g, dtype=float).reshape(-1, 1), gamma)[0])


def h_gamma_max(zv, gamma: float) -> Array:
    """Max-form kernel of a single vector."""
    z = np.asarray(zv, dtype=float).reshape(-1, 1)
    return hgamma(z, gamma)[:, 0]


def h_gamma_smooth(zv, gamma: float) -> Array:
    """C^1 kernel of a single vector."""
    z = np.asarray(zv, dtype=float).reshape(-1, 1)
    return hgamma_smooth(z, gamma)[:, 0]


def h_gamma_newton_block(zv, qv, alpha: float, gamma: float,
                         modified: bool = False) -> tuple[Array, bool]:
    """Single m x m Newton block plus a degeneracy flag for ||z|| = 0."""
    z = np.asarray(zv, dtype=float).reshape(-1, 1)
    q = np.asarray(qv, dtype=float).reshape(-1, 1)
    block = newton_blocks(z, q, alpha, gamma, modified=modified)[:, :, 0]
    degenerate = bool(_norms(z)[0] == 0.0)
    return block, degenerate
