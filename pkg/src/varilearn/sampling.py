"""Dynamic sample-size BFGS for weight learning on larger training sets.

Instead of evaluating every training pair per outer iteration, each
iteration works on a random subset whose size is increased only when the
sample gradient fails a variance gate: the finite-population estimate of
the gradient variance must stay below theta^2 times the squared sample
gradient norm, which guarantees the sampled direction is still a descent
direction for the full objective. Sample sizes never shrink, a fresh
sample of the same size is drawn each iteration, and the BFGS matrix is
kept across augmentations (the curvature gate already protects it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bilevel import (LearnOptions, LearnResult, PairOracle, _bfgs_engine,
                      _LogMap)
from .fidelity import parse_noise_spec, synthesize_noise
from .grids import ImageGrid

Array = np.ndarray


@dataclass(frozen=True)
class TrainingPair:
    clean: ImageGrid
    noisy: ImageGrid
    id: str = ""


class TrainingSet(Sequence):
    """Ordered clean/noisy pairs sharing one grid."""

    def __init__(self, pairs):
        pairs = tuple(
            p if isinstance(p, TrainingPair) else TrainingPair(*p) for p in pairs)
        if not pairs:
            raise ValueError("training set is empty")
        shape, h = pairs[0].clean.shape, pairs[0].clean.h
        for p in pairs:
            if p.clean.shape != shape or p.noisy.shape != shape:
                raise ValueError("training pairs differ in image dimensions")
            if p.clean.h != h or p.noisy.h != h:
                raise ValueError("training pairs differ in mesh size")
        self.pairs = pairs

    @property
    def K(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @classmethod
    def synthesize(cls, cleans, noise, seed: int = 0) -> "TrainingSet":
        """Corrupt each clean image independently; pair i uses seed + i.

        `noise` may be parsed components or a spec string like
        'gaussian(0.02)+impulse(0.05)'.
        """
        if isinstance(noise, str):
            noise = parse_noise_spec(noise)
        pairs = []
        for i, clean in enumerate(cleans):
            noisy = synthesize_noise(clean, noise, seed=seed + i)
            pairs.append(TrainingPair(clean, noisy, id=f"pair{i}"))
        return cls(pairs)


@dataclass
class SampleState:
    """Current subset of the training set plus the draw bookkeeping."""

    population: int
    theta: float
    seed: int
    indices: Array
    rng: np.random.Generator
    history: list[int] = field(default_factory=list)
    augmentations: int = 0

    @classmethod
    def initial(cls, population: int, theta: float, size: int,
                seed: int = 0) -> "SampleState":
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if not 1 <= size <= population:
            raise ValueError("initial sample size must lie in [1, K]")
        rng = np.random.default_rng(seed)
        state = cls(population=population, theta=theta, seed=seed,
                    indices=np.arange(0), rng=rng)
        state.indices = state._draw(size)
        state.history.append(size)
        return state

    def _draw(self, size: int) -> Array:
        if size >= self.population:
            return np.arange(self.population)
        return np.sort(self.rng.choice(self.population, size=size, replace=False))

    def redraw(self) -> Array:
        """Fresh sample of the current size."""
        self.indices = self._draw(len(self.indices))
        return self.indices

    def grow(self, size: int) -> Array:
        size = min(self.population, max(size, len(self.indices) + 1))
        self.indices = self._draw(size)
        self.history.append(size)
        self.augmentations += 1
        return self.indices


def _variance_sum(per_grads: Array) -> float:
    return float(np.sum(np.var(per_grads, axis=0, ddof=1)))


def variance_test(per_grads: Array, grad: Array, theta: float, population: int,
                  size: int | None = None) -> tuple[bool, float, float]:
    """Gate from the descent condition: estimated gradient variance with the
    finite-population correction against theta^2 * ||sample gradient||^2.

    Returns (passed, lhs, rhs). A single-pair sample cannot estimate its
    variance and fails outright unless it already covers the population.
    """
    per_grads = np.atleast_2d(np.asarray(per_grads, dtype=float))
    n = per_grads.shape[0] if size is None else int(size)
    rhs = theta ** 2 * float(np.asarray(grad) @ np.asarray(grad))
    if n >= population:
        return True, 0.0, rhs
    if n < 2:
        return False, math.inf, rhs
    lhs = _variance_sum(per_grads) * (population - n) / (n * (population - 1))
    return lhs <= rhs, lhs, rhs


def augment_sample(state: SampleState, per_grads: Array, grad: Array,
                   theta: float | None = None) -> SampleState:
    """Grow the sample to the smallest size projected to pass the gate.

    Solving lhs(n) <= rhs for n gives n >= V*K / (theta^2*||g||^2*(K-1) + V)
    with V the current variance estimate; the result is clamped to grow by
    at least one and never beyond the population.
    """
    theta = state.theta if theta is None else theta
    per_grads = np.atleast_2d(np.asarray(per_grads, dtype=float))
    K = state.population
    if per_grads.shape[0] < 2:
        state.grow(len(state.indices) + 1)
        return state
    V = _variance_sum(per_grads)
    g2 = float(np.asarray(grad) @ np.asarray(grad))
    denom = theta ** 2 * g2 * (K - 1) + V
    target = K if denom <= 0.0 or not math.isfinite(denom) else math.ceil(V * K / denom)
    state.grow(target)
    return state


def batch_gradient(training, indices, params: Mapping[str, object],
                   template, options: LearnOptions | None = None):
    """Gradient of the mean tracking cost over a subset of pairs.

    Returns (grad, per_pair) where grad maps each weight name to the mean of
    the per-pair gradients (floats for scalar weights, arrays for spatial
    ones) and per_pair is the list of individual gradient dicts.
    """
    opts = options or LearnOptions()
    oracle = PairOracle(template, training, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol,
                        solve_max_iter=opts.solve_max_iter)
    indices = list(indices)
    _, per_pair = oracle.costs_and_grads(params, indices)
    grad = {}
    for name in per_pair[0]:
        total = sum(np.asarray(g[name], dtype=float) for g in per_pair)
        mean = total / len(per_pair)
        grad[name] = float(mean) if np.ndim(mean) == 0 else mean
    return grad, per_pair


def stack_gradients(per_pair, names) -> Array:
    """Per-pair gradient dicts -> (n_pairs, n_weights) array of scalars."""
    return np.array([[float(g[n]) for n in names] for g in per_pair])


class DynamicSampler:
    """Sampler plugged into the BFGS driver: redraw, test, augment."""

    def __init__(self, population: int, theta: float = 0.5,
                 initial_size: int = 2, seed: int = 0):
        self.state = SampleState.initial(population, theta, initial_size, seed)
        self.sizes: list[int] = []
        self.tests: list[dict] = []

    def draw(self) -> Array:
        return self.state.redraw()

    def gate(self, indices, fval, gvec, per_vecs, reevaluate):
        while True:
            passed, lhs, rhs = variance_test(
                per_vecs, gvec, self.state.theta, self.state.population,
                len(indices))
            self.tests.append({"size": len(indices), "lhs": lhs, "rhs": rhs,
                               "passed": bool(passed)})
            if passed or len(indices) >= self.state.population:
                break
            augment_sample(self.state, per_vecs, gvec)
            indices = self.state.indices
            fval, gvec, per_vecs = reevaluate(indices)
        self.sizes.append(len(indices))
        return indices, fval, gvec, per_vecs


@dataclass
class DynamicLearnResult(LearnResult):
    confirmed_cost: float = math.nan
    augmentations: int = 0
    variance_log: list[dict] = field(default_factory=list)


def dynamic_learn(training, template, init: Mapping[str, float],
                  theta: float = 0.5, initial_size: int = 2, seed: int = 0,
                  options: LearnOptions | None = None) -> DynamicLearnResult:
    """Weight learning with adaptively sized training subsets.

    Matches learn() exactly when theta = 0 and initial_size = K (the gate
    then always passes on the full, deterministically ordered sample). Ends
    with one confirmation evaluation of the full-set cost at the learned
    weights; its solves are included in the reported count.
    """
    opts = options or LearnOptions()
    names = [n for n in template.weight_names() if n in init]
    if not names:
        raise ValueError("init contains no learnable weights of this template")
    oracle = PairOracle(template, training, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol,
                        solve_max_iter=opts.solve_max_iter)
    sampler = DynamicSampler(oracle.size, theta=theta,
                             initial_size=initial_size, seed=seed)
    base = _bfgs_engine(oracle, _LogMap(names), init, opts, sampler)
    confirmed = float(oracle.costs(base.params, range(oracle.size)).mean())
    return DynamicLearnResult(
        params=base.params, cost=base.cost, grad=base.grad,
        iterations=base.iterations, status=base.status,
        converged=base.converged, solves=oracle.solves,
        history=base.history, sample_sizes=base.sample_sizes,
        bfgs_skips=base.bfgs_skips, confirmed_cost=confirmed,
        augmentations=sampler.state.augmentations,
        variance_log=sampler.tests)
