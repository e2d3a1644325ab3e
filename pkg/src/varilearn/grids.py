"""Regular-grid images and exact discrete differential operators.

Images live on a uniform pixel grid with mesh size h (default 1/max(ny, nx)
so the longer image side spans a unit interval). Gradients use forward
differences, divergences are the exact negative adjoints of the gradients
under the h^2-weighted inner products, so summation-by-parts identities hold
to machine precision for both boundary closures. Everything here is
matrix-free; assembled sparse versions for Newton solvers come from
``diff_matrices``.

Array layout: ``values[i, j]`` has row index i along y and column index j
along x. Vector component 1 is the x-derivative (axis 1), component 2 the
y-derivative (axis 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

Array = np.ndarray


class Boundary(Enum):
    NEUMANN = "neumann"
    DIRICHLET0 = "dirichlet0"


def default_mesh_size(shape: tuple[int, int]) -> float:
    """h such that the longer side has unit length."""
    return 1.0 / max(shape)


def _as_field(values, name: str) -> Array:
    a = np.asarray(values, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _check_mesh(h: float) -> float:
    h = float(h)
    if not (np.isfinite(h) and h > 0):
        raise ValueError(f"mesh size must be positive, got {h}")
    return h


@dataclass
class ImageGrid:
    """A scalar field on a regular grid with mesh size and boundary mode."""

    values: Array
    h: float | None = None
    boundary: Boundary = Boundary.NEUMANN

    def __post_init__(self):
        self.values = _as_field(self.values, "image")
        if self.h is None:
            self.h = default_mesh_size(self.values.shape)
        self.h = _check_mesh(self.h)
        self.boundary = Boundary(self.boundary)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def like(self, values: Array) -> "ImageGrid":
        """New image with the same mesh and boundary mode."""
        return ImageGrid(values, h=self.h, boundary=self.boundary)

    def copy(self) -> "ImageGrid":
        return ImageGrid(self.values.copy(), h=self.h, boundary=self.boundary)


@dataclass
class VectorField:
    """A 2-component field (e.g. an image gradient) on the same grid header."""

    v1: Array
    v2: Array
    h: float | None = None
    boundary: Boundary = Boundary.NEUMANN

    def __post_init__(self):
        self.v1 = _as_field(self.v1, "vector component 1")
        self.v2 = _as_field(self.v2, "vector component 2")
        if self.v1.shape != self.v2.shape:
            raise ValueError("vector components differ in shape")
        if self.h is None:
            self.h = default_mesh_size(self.v1.shape)
        self.h = _check_mesh(self.h)
        self.boundary = Boundary(self.boundary)

    @property
    def shape(self) -> tuple[int, int]:
        return self.v1.shape

    def stack(self) -> Array:
        return np.stack([self.v1, self.v2])


@dataclass
class TensorField:
    """A symmetric 2x2 tensor field stored as (t11, t12, t22)."""

    t11: Array
    t12: Array
    t22: Array
    h: float | None = None
    boundary: Boundary = Boundary.NEUMANN

    def __post_init__(self):
        self.t11 = _as_field(self.t11, "tensor component 11")
        self.t12 = _as_field(self.t12, "tensor component 12")
        self.t22 = _as_field(self.t22, "tensor component 22")
        if not (self.t11.shape == self.t12.shape == self.t22.shape):
            raise ValueError("tensor components differ in shape")
        if self.h is None:
            self.h = default_mesh_size(self.t11.shape)
        self.h = _check_mesh(self.h)
        self.boundary = Boundary(self.boundary)

    @property
    def shape(self) -> tuple[int, int]:
        return self.t11.shape


# 1-d building blocks. Forward difference along an axis plus its exact
# transpose; the boundary closure fixes the last difference.

def _dx(a: Array, h: float, dirichlet: bool) -> Array:
    out = np.zeros_like(a)
    if a.shape[1] > 1:
        out[:, :-1] = a[:, 1:] - a[:, :-1]
    if dirichlet:
        out[:, -1] = -a[:, -1]
    out /= h
    return out


def _dy(a: Array, h: float, dirichlet: bool) -> Array:
    out = np.zeros_like(a)
    if a.shape[0] > 1:
        out[:-1, :] = a[1:, :] - a[:-1, :]
    if dirichlet:
        out[-1, :] = -a[-1, :]
    out /= h
    return out


def _dxt(v: Array, h: float, dirichlet: bool) -> Array:
    # transpose of _dx: <_dx(a), v> = <a, _dxt(v)> entrywise (h cancels
    # against the 1/h in the factor below).
    out = np.zeros_like(v)
    n = v.shape[1]
    if n == 1:
        if dirichlet:
            out[:, 0] = -v[:, 0]
    else:
        out[:, 0] = -v[:, 0]
        out[:, 1:-1] = v[:, :-2] - v[:, 1:-1]
        out[:, -1] = v[:, -2] - (v[:, -1] if dirichlet else 0.0)
    out /= h
    return out


def _dyt(v: Array, h: float, dirichlet: bool) -> Array:
    out = np.zeros_like(v)
    n = v.shape[0]
    if n == 1:
        if dirichlet:
            out[0, :] = -v[0, :]
    else:
        out[0, :] = -v[0, :]
        out[1:-1, :] = v[:-2, :] - v[1:-1, :]
        out[-1, :] = v[-2, :] - (v[-1, :] if dirichlet else 0.0)
    out /= h
    return out


def grad_forward(u: ImageGrid) -> VectorField:
    """Forward-difference gradient with the image's boundary closure."""
    d = u.boundary is Boundary.DIRICHLET0
    return VectorField(_dx(u.values, u.h, d), _dy(u.values, u.h, d),
                       h=u.h, boundary=u.boundary)


def div_backward(q: VectorField) -> ImageGrid:
    """Backward divergence, the exact negative adjoint of grad_forward."""
    d = q.boundary is Boundary.DIRICHLET0
    vals = -(_dxt(q.v1, q.h, d) + _dyt(q.v2, q.h, d))
    return ImageGrid(vals, h=q.h, boundary=q.boundary)


def laplacian_5pt(u: ImageGrid) -> ImageGrid:
    """Five-point Laplacian, computed as div_backward(grad_forward(u))."""
    return div_backward(grad_forward(u))


def sym_grad(w: VectorField) -> TensorField:
    """Symmetrised gradient of a vector field."""
    d = w.boundary is Boundary.DIRICHLET0
    t11 = _dx(w.v1, w.h, d)
    t22 = _dy(w.v2, w.h, d)
    t12 = 0.5 * (_dy(w.v1, w.h, d) + _dx(w.v2, w.h, d))
    return TensorField(t11, t12, t22, h=w.h, boundary=w.boundary)


def sym_div(t: TensorField) -> VectorField:
    """Negative adjoint of sym_grad under the weighted tensor product."""
    d = t.boundary is Boundary.DIRICHLET0
    v1 = -(_dxt(t.t11, t.h, d) + _dyt(t.t12, t.h, d))
    v2 = -(_dxt(t.t12, t.h, d) + _dyt(t.t22, t.h, d))
    return VectorField(v1, v2, h=t.h, boundary=t.boundary)


# h^2-weighted inner products and norms. The tensor product carries the
# Frobenius weight (1, 2, 1) for the packed off-diagonal entry.

def inner_image(a: ImageGrid, b: ImageGrid) -> float:
    return float(a.h ** 2 * np.vdot(a.values, b.values))


def inner_vector(a: VectorField, b: VectorField) -> float:
    return float(a.h ** 2 * (np.vdot(a.v1, b.v1) + np.vdot(a.v2, b.v2)))


def inner_tensor(a: TensorField, b: TensorField) -> float:
    s = np.vdot(a.t11, b.t11) + 2.0 * np.vdot(a.t12, b.t12) + np.vdot(a.t22, b.t22)
    return float(a.h ** 2 * s)


def norm_image(a: ImageGrid) -> float:
    return float(np.sqrt(max(inner_image(a, a), 0.0)))


def norm_vector(a: VectorField) -> float:
    return float(np.sqrt(max(inner_vector(a, a), 0.0)))


def norm_tensor(a: TensorField) -> float:
    return float(np.sqrt(max(inner_tensor(a, a), 0.0)))


def _diff_1d(n: int, h: float, dirichlet: bool) -> sp.csr_matrix:
    main = -np.ones(n)
    if not dirichlet:
        main[-1] = 0.0
    upper = np.ones(n - 1) if n > 1 else np.zeros(0)
    return (sp.diags([main, upper], [0, 1], shape=(n, n)) / h).tocsr()


@lru_cache(maxsize=64)
def diff_matrices(shape: tuple[int, int], h: float,
                  boundary: Boundary) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse (Dx, Dy) acting on row-major flattened images.

    Builds the same stencils as grad_forward, so matrix transposes are the
    exact discrete adjoints used by div_backward.
    """
    ny, nx = shape
    d = boundary is Boundary.DIRICHLET0
    dx1 = _diff_1d(nx, h, d)
    dy1 = _diff_1d(ny, h, d)
    Dx = sp.kron(sp.identity(ny, format="csr"), dx1, format="csr")
    Dy = sp.kron(dy1, sp.identity(nx, format="csr"), format="csr")
    return Dx, Dy


@lru_cache(maxsize=64)
def stiffness_matrix(shape: tuple[int, int], h: float,
                     boundary: Boundary) -> sp.csr_matrix:
    """Dx'Dx + Dy'Dy, the negative of the assembled 5-point Laplacian."""
    Dx, Dy = diff_matrices(shape, h, boundary)
    return (Dx.T @ Dx + Dy.T @ Dy).tocsr()
