"""Data-fidelity terms and synthetic noise generation.

Three photometries: squared L2 for additive Gaussian noise, the Poisson
log-likelihood u - f*log(u), and a Huberised L1 for impulse noise. Each term
reports value, pointwise gradient and the diagonal of its second derivative,
which is all the Newton solvers need. Noise synthesis mirrors the same three
models and is deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .grids import ImageGrid
from . import huber

Array = np.ndarray


class FidelityKind(Enum):
    GAUSSIAN_L2 = "gaussian"
    POISSON_KL = "poisson"
    IMPULSE_L1 = "l1"


class DomainError(ValueError):
    """Raised when an iterate leaves the domain of a fidelity term."""

    def __init__(self, message: str, bad_pixels: int = 0):
        super().__init__(message)
        self.bad_pixels = bad_pixels


@dataclass
class FidelityModel:
    """One data term: a kind, its observation, and the L1 huber parameter."""

    kind: FidelityKind
    data: ImageGrid
    gamma: float = np.inf  # only read by the L1 kind

    def __post_init__(self):
        self.kind = FidelityKind(self.kind)
        if not self.gamma > 0:
            raise ValueError("huber parameter must be positive")


class PhiTerms(NamedTuple):
    value: float          # h^2-weighted integral of the density
    grad: Array           # pointwise derivative in u
    hess_diag: Array      # pointwise second derivative in u


def phi_density(kind: FidelityKind, f: Array, u: Array,
                gamma: float = np.inf) -> tuple[Array, Array, Array]:
    """Pointwise (density, gradient, second derivative) of one data term."""
    kind = FidelityKind(kind)
    if kind is FidelityKind.GAUSSIAN_L2:
        r = u - f
        return 0.5 * r * r, r, np.ones_like(u)
    if kind is FidelityKind.POISSON_KL:
        # the log term vanishes where f == 0, so only pixels with counts
        # constrain the sign of u
        counted = f > 0.0
        bad = int(np.count_nonzero((u <= 0.0) & counted))
        if bad:
            raise DomainError(
                f"poisson fidelity needs positive intensities ({bad} pixels <= 0)",
                bad_pixels=bad)
        logu = np.zeros_like(u)
        np.log(u, out=logu, where=counted)
        ratio = np.divide(f, u, out=np.zeros_like(u), where=counted)
        return u - f * logu, 1.0 - ratio, ratio / np.where(counted, u, 1.0)
    # Huberised L1: scalar huber norm of the residual
    r = (u - f)[None]
    density = huber.huber(r, gamma)
    grad = huber.hgamma(r, gamma)[0]
    if np.isfinite(gamma):
        hess = np.where(gamma * np.abs(u - f) <= 1.0, gamma, 0.0)
    else:
        hess = np.zeros_like(u)
    return density, grad, hess


def phi_terms(kind: FidelityKind, f: Array, u: Array, h: float,
              gamma: float = np.inf) -> PhiTerms:
    """Value/gradient/Hessian-diagonal of one unweighted fidelity term."""
    density, grad, hess = phi_density(kind, f, u, gamma)
    return PhiTerms(h * h * float(np.sum(density)), grad, hess)


def phi_eval(model: FidelityModel, u: ImageGrid) -> PhiTerms:
    """Evaluate a fidelity model at an image (arrays share u's grid)."""
    if model.data.shape != u.shape:
        raise ValueError("fidelity data and image shapes differ")
    return phi_terms(model.kind, model.data.values, u.values, u.h, model.gamma)


# Noise models. Parameters are validated eagerly so a bad experiment config
# fails before any solving starts.

@dataclass(frozen=True)
class GaussianNoise:
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError("gaussian variance must be >= 0")


@dataclass(frozen=True)
class PoissonNoise:
    peak: float = 100.0  # photon count that intensity 1.0 maps to

    def __post_init__(self):
        if not self.peak > 0:
            raise ValueError("poisson peak must be > 0")


@dataclass(frozen=True)
class ImpulseNoise:
    density: float

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("impulse density must be in [0, 1]")


NoiseComponent = GaussianNoise | PoissonNoise | ImpulseNoise


def synthesize_noise(clean: ImageGrid, components, seed: int) -> ImageGrid:
    """Apply noise components in order with a fixed seed.

    Gaussian adds N(0, variance); Poisson draws counts at the given peak and
    rescales; impulse replaces a Bernoulli(density) subset with uniform
    values in [0, 1]. A single component may be passed bare.
    """
    if isinstance(components, (GaussianNoise, PoissonNoise, ImpulseNoise)):
        components = [components]
    rng = np.random.default_rng(seed)
    out = clean.values.copy()
    for comp in components:
        if isinstance(comp, GaussianNoise):
            out = out + rng.normal(0.0, np.sqrt(comp.variance), out.shape)
        elif isinstance(comp, PoissonNoise):
            out = rng.poisson(comp.peak * np.clip(out, 0.0, None)) / comp.peak
            out = out.astype(float)
        elif isinstance(comp, ImpulseNoise):
            mask = rng.random(out.shape) < comp.density
            values = rng.random(out.shape)
            out = np.where(mask, values, out)
        else:
            raise ValueError(f"unknown noise component {comp!r}")
    return clean.like(out)


def parse_noise_spec(text: str) -> list[NoiseComponent]:
    """Parse strings like 'gaussian(0.02)+impulse(0.05)' or 'poisson'."""
    comps: list[NoiseComponent] = []
    for part in text.split("+"):
        part = part.strip()
        if not part:
            raise ValueError(f"empty noise component in {text!r}")
        name, _, arg = part.partition("(")
        name = name.strip().lower()
        if arg:
            if not arg.endswith(")"):
                raise ValueError(f"unbalanced parenthesis in {part!r}")
            arg = arg[:-1].strip()
        try:
            value = float(arg) if arg else None
        except ValueError:
            raise ValueError(f"bad numeric argument in {part!r}") from None
        if name == "gaussian":
            if value is None:
                raise ValueError("gaussian noise needs a variance argument")
            comps.append(GaussianNoise(value))
        elif name == "poisson":
            comps.append(PoissonNoise(value) if value is not None else PoissonNoise())
        elif name == "impulse":
            if value is None:
                raise ValueError("impulse noise needs a density argument")
            comps.append(ImpulseNoise(value))
        else:
            raise ValueError(f"unknown noise kind {name!r}")
    return comps


def format_noise_spec(components) -> str:
    """Inverse of parse_noise_spec, used when echoing configs."""
    parts = []
    for comp in components:
        if isinstance(comp, GaussianNoise):
            parts.append(f"gaussian({comp.variance:g})")
        elif isinstance(comp, PoissonNoise):
            parts.append(f"poisson({comp.peak:g})")
        elif isinstance(comp, ImpulseNoise):
            parts.append(f"impulse({comp.density:g})")
        else:
            raise ValueError(f"unknown noise component {comp!r}")
    return "+".join(parts)
