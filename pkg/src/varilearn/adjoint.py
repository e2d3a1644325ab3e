"""Adjoint solves and reduced gradients for the weight-learning problem.

The upper-level cost is the squared distance of the denoised image to the
ground truth. Differentiating the lower-level optimality system at its
solution gives one linear adjoint solve with the transposed Newton matrix;
every weight gradient is then a single inner product against the stored
parameter-derivative columns. No lower-level re-solves are needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grids import ImageGrid
from .problems import DenoiseProblem, DenoiseResult

Array = np.ndarray

# block gap above which the globalizing modification still visibly differs
# from the exact derivative at exit; gradients are then only approximate
MOD_GAP_WARN = 1e-6


@dataclass
class AdjointState:
    """Adjoint solution: image-block rows, full stacked vector, and cost."""

    p: ImageGrid
    full: Array
    cost: float


def tracking_cost(u: ImageGrid, clean: ImageGrid) -> float:
    if u.shape != clean.shape:
        raise ValueError("denoised and clean images differ in shape")
    r = u.values - clean.values
    return 0.5 * u.h ** 2 * float(np.sum(r * r))


def solve_adjoint(result: DenoiseResult, clean: ImageGrid) -> AdjointState:
    """Solve the transposed linearized optimality system at the solution."""
    lin = result.linearization
    if lin is None:
        raise ValueError("result carries no linearization")
    if clean.shape != result.u.shape:
        raise ValueError("clean image shape does not match the solve")
    if lin.mod_gap > MOD_GAP_WARN:
        # static text so repeated occurrences collapse under default filters
        warnings.warn(
            "adjoint linearization still carries the globalized Newton "
            "modification at exit; tighten the solver tolerance for exact "
            "gradients", RuntimeWarning, stacklevel=2)
    diff = result.u.values - clean.values
    rhs = np.zeros(lin.mat.shape[0])
    rhs[lin.u_slice] = -diff.ravel()
    full = lin.solve_transposed(rhs)
    p = ImageGrid(full[lin.u_slice].reshape(lin.shape).copy(),
                  h=lin.h, boundary=result.u.boundary)
    return AdjointState(p=p, full=full, cost=tracking_cost(result.u, clean))


def reduced_gradient(result: DenoiseResult, adjoint: AdjointState,
                     problem: DenoiseProblem | None = None) -> dict[str, float | Array]:
    """Cost gradients for every weight present in the linearization.

    Scalar weights map to floats; spatially varying weights map to arrays of
    partial derivatives with the image shape.
    """
    lin = result.linearization
    h2 = lin.h ** 2
    grads: dict[str, float | Array] = {}
    for name, col in lin.dparams.items():
        grads[name] = h2 * float(col @ adjoint.full)
    pu = adjoint.full[lin.u_slice].reshape(lin.shape)
    for name, integrand in lin.spatial_integrands.items():
        grads[name] = h2 * integrand * pu
    return grads
