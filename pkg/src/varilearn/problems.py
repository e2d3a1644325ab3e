"""Problem descriptions and solver result types.

A DenoiseProblem bundles one regularizer, one or more weighted data terms,
the joint smoothing/huber parameters and an optional positivity penalty.
DenoiseResult carries the solution, the feasible dual certificates, a
residual trace and the final linearization that the adjoint solver reuses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fidelity import FidelityModel
from .grids import Boundary, ImageGrid

Array = np.ndarray


class RegKind(Enum):
    TV = "tv"
    TGV2 = "tgv2"
    ICTV = "ictv"


@dataclass(frozen=True)
class Regularizer:
    """Regularizer kind plus its (fixed-order) weights."""

    kind: RegKind
    weights: tuple[float, ...]

    def __post_init__(self):
        expected = 1 if self.kind is RegKind.TV else 2
        if len(self.weights) != expected:
            raise ValueError(
                f"{self.kind.value} takes {expected} weight(s), got {len(self.weights)}")
        for w in self.weights:
            if not (np.isfinite(w) and w >= 0):
                raise ValueError("regularizer weights must be finite and >= 0")

    @staticmethod
    def tv(alpha: float) -> "Regularizer":
        return Regularizer(RegKind.TV, (float(alpha),))

    @staticmethod
    def tgv2(alpha1: float, alpha2: float) -> "Regularizer":
        return Regularizer(RegKind.TGV2, (float(alpha1), float(alpha2)))

    @staticmethod
    def ictv(alpha1: float, alpha2: float) -> "Regularizer":
        return Regularizer(RegKind.ICTV, (float(alpha1), float(alpha2)))


class Combine(Enum):
    WEIGHTED_SUM = "weighted_sum"
    INFCONV_L1L2 = "infconv_l1l2"
    GAUSS_POISSON = "gauss_poisson"


@dataclass(frozen=True)
class Positivity:
    """Quadratic penalty eta/2 * ||min(u, delta)||^2 keeping u near-positive."""

    eta: float = 1e4
    delta: float = 1e-3

    def __post_init__(self):
        if not (self.eta > 0 and 0 < self.delta < 1):
            raise ValueError("positivity penalty needs eta > 0, 0 < delta < 1")


Weight = Any  # float or ImageGrid (spatially varying fidelity weight)


def _check_weight(w: Weight) -> Weight:
    if isinstance(w, ImageGrid):
        if np.any(w.values < 0):
            raise ValueError("spatial weight must be >= 0 pointwise")
        return w
    w = float(w)
    if not (np.isfinite(w) and w >= 0):
        raise ValueError("weights must be finite and >= 0")
    return w


@dataclass
class DenoiseProblem:
    regularizer: Regularizer
    fidelities: list[tuple[Weight, FidelityModel]]
    combine: Combine = Combine.WEIGHTED_SUM
    mu: float = 1e-12
    gamma: float = 100.0
    positivity: Positivity | None = None

    def __post_init__(self):
        if not self.fidelities:
            raise ValueError("need at least one fidelity term")
        self.fidelities = [(_check_weight(w), m) for w, m in self.fidelities]
        shape = self.fidelities[0][1].data.shape
        for w, m in self.fidelities:
            if m.data.shape != shape:
                raise ValueError("fidelity observations differ in shape")
            if isinstance(w, ImageGrid) and w.shape != shape:
                raise ValueError("spatial weight and observation differ in shape")
        if not self.mu >= 0:
            raise ValueError("smoothing weight mu must be >= 0")
        if not self.gamma > 0:
            raise ValueError("huber parameter must be positive")

    @property
    def data(self) -> ImageGrid:
        return self.fidelities[0][1].data

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def h(self) -> float:
        return self.data.h

    @property
    def boundary(self) -> Boundary:
        return self.data.boundary


class SolverError(RuntimeError):
    """Newton system could not be solved (singular or numerically broken)."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class Linearization:
    """Final assembled Newton system of a converged solve.

    ``mat`` is the modified linearization exactly as assembled at the
    returned iterate; its transpose drives the adjoint solve. ``dparams``
    holds d(residual)/d(weight) columns for every scalar weight, and
    ``spatial_integrands`` the pointwise d(residual_u)/d(weight(x)) fields
    for spatially varying fidelity weights.
    """

    mat: sp.csr_matrix
    shape: tuple[int, int]
    h: float
    u_slice: slice
    dparams: dict[str, Array]
    spatial_integrands: dict[str, Array] = field(default_factory=dict)
    mod_gap: float = 0.0
    _lu: Any = field(default=None, repr=False)

    def factorize(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.mat.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"linearization is singular: {exc}", -1) from exc
        return self._lu

    def solve_transposed(self, rhs: Array) -> Array:
        """Solve mat^T x = rhs via the cached factorization."""
        x = self.factorize().solve(rhs, trans="T")
        if not np.all(np.isfinite(x)):
            raise SolverError("adjoint solve produced non-finite values", -1)
        return x


@dataclass
class DenoiseResult:
    u: ImageGrid
    duals: dict[str, Array]          # feasible duals, stacked (m, ny, nx)
    dual_bounds: dict[str, Any]      # pixelwise norm bound per dual (weight)
    aux: dict[str, ImageGrid]        # extra primal blocks (w, v, n, ...)
    trace: list[float]
    converged: bool
    iterations: int
    energy: float
    linearization: Linearization
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.converged:
            warnings.warn(
                f"solver stopped without reaching tolerance after "
                f"{self.iterations} iterations (residual {self.trace[-1]:.3e})",
                RuntimeWarning, stacklevel=3)
