"""Learning fidelity and regularization weights from ground-truth pairs.

The outer problem minimizes the mean squared tracking error of the denoised
images over a training set, with each denoised image defined implicitly by
the lower-level solver. Scalar weights are optimized by BFGS on their
logarithms (positivity for free, and the metric becomes relative), with an
Armijo backtracking line search; gradients come from one adjoint solve per
pair. Spatially varying weights are optimized in the original variables by
a projected spectral gradient method.

The BFGS driver is written against a sampler object so the dynamic sample
size strategy can reuse it unchanged; the trivial sampler here always
returns the whole training set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .adjoint import reduced_gradient, solve_adjoint, tracking_cost
from .fidelity import FidelityKind, FidelityModel
from .grids import ImageGrid, stiffness_matrix
from .parallel import pair_map
from .problems import (Combine, DenoiseProblem, DenoiseResult, Positivity,
                       RegKind, Regularizer)
from .solvers import solve

Array = np.ndarray


class LineSearchError(RuntimeError):
    """Backtracking exhausted without sufficient decrease."""


# ----------------------------------------------------------------------
# problem templates


_REG_WEIGHT_NAMES = {
    RegKind.TV: ("alpha1",),
    RegKind.TGV2: ("alpha1", "alpha2"),
    RegKind.ICTV: ("alpha1", "alpha2"),
}


@dataclass(frozen=True)
class ProblemTemplate:
    """Recipe turning (weights, noisy image) into a denoising problem.

    Weight names are canonical: regularization weights are alpha1 (and
    alpha2 for the second-order models), data weights are lam1..lamN in the
    order of `fidelities`. Values in `fixed` are held constant; the rest
    must be supplied per call.
    """

    reg: RegKind = RegKind.TV
    fidelities: tuple[FidelityKind, ...] = (FidelityKind.GAUSSIAN_L2,)
    combine: Combine = Combine.WEIGHTED_SUM
    mu: float = 1e-12
    gamma: float = 100.0
    fid_gammas: tuple[float, ...] | None = None
    positivity: Positivity | None = None
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "reg", RegKind(self.reg))
        object.__setattr__(self, "fidelities",
                           tuple(FidelityKind(k) for k in self.fidelities))
        if self.fid_gammas is not None and len(self.fid_gammas) != len(self.fidelities):
            raise ValueError("fid_gammas must match fidelities in length")

    def weight_names(self) -> tuple[str, ...]:
        lams = tuple(f"lam{i + 1}" for i in range(len(self.fidelities)))
        return _REG_WEIGHT_NAMES[self.reg] + lams

    def free_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.weight_names() if n not in self.fixed)

    def _fid_gamma(self, i: int) -> float:
        if self.fid_gammas is not None:
            return self.fid_gammas[i]
        if self.fidelities[i] is FidelityKind.IMPULSE_L1:
            return self.gamma
        return np.inf

    def instantiate(self, params: Mapping[str, object], noisy: ImageGrid) -> DenoiseProblem:
        merged = dict(self.fixed)
        merged.update(params)
        missing = [n for n in self.weight_names() if n not in merged]
        if missing:
            raise KeyError(f"missing weight values: {missing}")

        def wt(name):
            v = merged[name]
            if isinstance(v, ImageGrid):
                return v
            if isinstance(v, np.ndarray):
                return ImageGrid(v, h=noisy.h, boundary=noisy.boundary)
            return float(v)

        reg_w = tuple(wt(n) for n in _REG_WEIGHT_NAMES[self.reg])
        regularizer = Regularizer(self.reg, reg_w)
        fids = [(wt(f"lam{i + 1}"), FidelityModel(kind, noisy, self._fid_gamma(i)))
                for i, kind in enumerate(self.fidelities)]
        return DenoiseProblem(regularizer=regularizer, fidelities=fids,
                              combine=self.combine, mu=self.mu,
                              gamma=self.gamma, positivity=self.positivity)


def _as_pairs(pairs) -> list[tuple[ImageGrid, ImageGrid]]:
    out = []
    for p in pairs:
        if hasattr(p, "clean") and hasattr(p, "noisy"):
            out.append((p.clean, p.noisy))
        else:
            clean, noisy = p
            out.append((clean, noisy))
    if not out:
        raise ValueError("training set is empty")
    return out


# ----------------------------------------------------------------------
# lower-level oracle with warm starts and a same-parameters result cache


class PairOracle:
    """Evaluates mean tracking cost and weight gradients over image pairs.

    Each pair keeps its own warm start across parameter changes, and all
    solves at the current parameter vector are cached, so the gradient
    evaluation that follows an accepted line-search trial reuses the trial
    solves instead of repeating them.
    """

    def __init__(self, template: ProblemTemplate, pairs,
                 solve_tol: float = 1e-7, solve_atol: float = 0.0,
                 solve_max_iter: int = 100):
        self.template = template
        self.pairs = _as_pairs(pairs)
        self.solve_tol = solve_tol
        self.solve_atol = solve_atol
        self.solve_max_iter = solve_max_iter
        self.solves = 0
        self._warm: dict[int, object] = {}
        self._key = None
        self._results: dict[int, DenoiseResult] = {}
        self._grads: dict[int, dict] = {}

    @property
    def size(self) -> int:
        return len(self.pairs)

    @staticmethod
    def _param_key(params: Mapping[str, object]):
        items = []
        for k in sorted(params):
            v = params[k]
            if isinstance(v, ImageGrid):
                v = v.values
            items.append((k, v.tobytes() if isinstance(v, np.ndarray) else float(v)))
        return tuple(items)

    def _sync(self, params):
        key = self._param_key(params)
        if key != self._key:
            self._key = key
            self._results.clear()
            self._grads.clear()

    def _result(self, params, idx: int) -> DenoiseResult:
        res = self._results.get(idx)
        if res is None:
            _, noisy = self.pairs[idx]
            problem = self.template.instantiate(params, noisy)
            res = solve(problem, tol=self.solve_tol, atol=self.solve_atol,
                        max_iter=self.solve_max_iter,
                        warm_start=self._warm.get(idx))
            self.solves += 1
            self._warm[idx] = res.info["warm"]
            self._results[idx] = res
        return res

    def costs(self, params, indices) -> Array:
        self._sync(params)
        indices = list(indices)

        def one(idx):
            return tracking_cost(self._result(params, idx).u, self.pairs[idx][0])

        return np.array(pair_map(one, indices))

    def costs_and_grads(self, params, indices) -> tuple[Array, list[dict]]:
        self._sync(params)
        indices = list(indices)

        def one(idx):
            res = self._result(params, idx)
            grads = self._grads.get(idx)
            if grads is None:
                adj = solve_adjoint(res, self.pairs[idx][0])
                grads = reduced_gradient(res, adj)
                self._grads[idx] = grads
            return tracking_cost(res.u, self.pairs[idx][0]), grads

        out = pair_map(one, indices)
        return np.array([c for c, _ in out]), [g for _, g in out]


# ----------------------------------------------------------------------
# BFGS pieces


@dataclass
class LearnOptions:
    max_iter: int = 100
    gtol: float = 1e-6
    ftol: float = 1e-10
    armijo: float = 1e-4
    shrink: float = 0.5
    max_linesearch: int = 30
    first_step: float = 0.5
    solve_tol: float = 1e-7
    solve_atol: float = 0.0
    solve_max_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.armijo <= 1.0:
            raise ValueError("armijo fraction must lie in (0, 1]")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink factor must lie in (0, 1)")


def bfgs_update(B: Array, s: Array, z: Array) -> tuple[Array, bool]:
    """Direct Hessian-approximation update; skips on nonpositive curvature."""
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 0.0:
        raise ValueError("BFGS matrix lost positive definiteness")
    zs = float(z @ s)
    if not zs > 0.0:
        return B, False
    Bnew = B - np.outer(Bs, Bs) / sBs + np.outer(z, z) / zs
    return Bnew, True


def armijo_search(f: Callable[[float], float], f0: float, slope: float,
                  t0: float = 1.0, beta: float = 1e-4, shrink: float = 0.5,
                  max_steps: int = 30) -> tuple[float, float, int]:
    """Backtrack t0, t0*shrink, ... until f(t) <= f0 + beta*t*slope."""
    if slope >= 0.0:
        raise LineSearchError("search direction is not a descent direction")
    t = t0
    for k in range(max_steps + 1):
        ft = f(t)
        if ft <= f0 + beta * t * slope:
            return t, ft, k + 1
        t *= shrink
    raise LineSearchError(f"no sufficient decrease within {max_steps} backtracks")


class _LogMap:
    """Bijection between positive named weights and a log-space vector."""

    def __init__(self, names: Sequence[str]):
        self.names = tuple(names)

    def to_vec(self, params: Mapping[str, float]) -> Array:
        vals = [float(params[n]) for n in self.names]
        if any(v <= 0 for v in vals):
            raise ValueError("scalar weights must be positive to learn in log space")
        return np.log(vals)

    def to_params(self, x: Array) -> dict[str, float]:
        return {n: float(math.exp(v)) for n, v in zip(self.names, x)}

    def grad_vec(self, params: Mapping[str, float], grads: Mapping[str, float]) -> Array:
        # chain rule through the exponential
        return np.array([float(grads[n]) * float(params[n]) for n in self.names])


class FullSampler:
    """Degenerate sampler: every iteration sees the whole training set."""

    def __init__(self, size: int):
        self.size = size
        self.sizes: list[int] = []

    def draw(self) -> Array:
        return np.arange(self.size)

    def gate(self, indices, fval, gvec, per_vecs, reevaluate):
        self.sizes.append(len(indices))
        return indices, fval, gvec, per_vecs


@dataclass
class LearnResult:
    params: dict
    cost: float
    grad: dict
    iterations: int
    status: str
    converged: bool
    solves: int
    history: list[dict]
    sample_sizes: list[int]
    bfgs_skips: int


def _bfgs_engine(oracle: PairOracle, vmap: _LogMap, init: Mapping[str, float],
                 opts: LearnOptions, sampler) -> LearnResult:
    x = vmap.to_vec(init)
    dim = x.size
    B = np.eye(dim)
    skips = 0
    history: list[dict] = []

    def evaluate(xvec, indices):
        params = vmap.to_params(xvec)
        costs, grads = oracle.costs_and_grads(params, indices)
        per_vecs = np.array([vmap.grad_vec(params, g) for g in grads])
        return float(costs.mean()), per_vecs.mean(axis=0), per_vecs

    indices = sampler.draw()
    fval, gvec, per_vecs = evaluate(x, indices)
    indices, fval, gvec, per_vecs = sampler.gate(
        indices, fval, gvec, per_vecs, lambda idx: evaluate(x, idx))
    g0 = float(np.linalg.norm(gvec))
    status = "maxiter"
    it = 0
    first = True
    while it < opts.max_iter:
        gnorm = float(np.linalg.norm(gvec))
        history.append({"iteration": it, "cost": fval, "gnorm": gnorm,
                        "sample_size": len(indices), "solves": oracle.solves,
                        "params": vmap.to_params(x)})
        if gnorm <= opts.gtol * max(g0, 1e-300):
            status = "gtol"
            break
        d = np.linalg.solve(B, -gvec)
        slope = float(gvec @ d)
        if slope >= 0.0:
            B = np.eye(dim)
            d = -gvec
            slope = -gnorm ** 2
        t0 = 1.0
        if first:
            dn = float(np.linalg.norm(d))
            if dn > opts.first_step:
                t0 = opts.first_step / dn
        try:
            t, f_trial, _ = armijo_search(
                lambda t: float(oracle.costs(vmap.to_params(x + t * d), indices).mean()),
                fval, slope, t0=t0, beta=opts.armijo, shrink=opts.shrink,
                max_steps=opts.max_linesearch)
        except LineSearchError:
            status = "linesearch"
            break
        s = t * d
        x_new = x + s
        indices_new = sampler.draw()
        f_new, g_new, per_new = evaluate(x_new, indices_new)
        indices_new, f_new, g_new, per_new = sampler.gate(
            indices_new, f_new, g_new, per_new, lambda idx: evaluate(x_new, idx))
        z = g_new - gvec
        if first:
            zs = float(z @ s)
            if zs > 0.0:
                B = (float(z @ z) / zs) * np.eye(dim)
        B, updated = bfgs_update(B, s, z)
        if not updated:
            skips += 1
        first = False
        it += 1
        f_prev = fval
        x, fval, gvec, per_vecs, indices = x_new, f_new, g_new, per_new, indices_new
        if abs(f_prev - f_trial) <= opts.ftol * max(1.0, abs(f_prev)):
            status = "ftol"
            history.append({"iteration": it, "cost": fval,
                            "gnorm": float(np.linalg.norm(gvec)),
                            "sample_size": len(indices), "solves": oracle.solves,
                            "params": vmap.to_params(x)})
            break
    params = vmap.to_params(x)
    return LearnResult(
        params=params, cost=fval,
        grad={n: float(g) for n, g in zip(vmap.names, gvec / np.maximum(
            [params[n] for n in vmap.names], 1e-300))},
        iterations=it, status=status,
        converged=status in ("gtol", "ftol"),
        solves=oracle.solves, history=history,
        sample_sizes=list(sampler.sizes), bfgs_skips=skips)


def learn(template: ProblemTemplate, pairs, init: Mapping[str, float],
          options: LearnOptions | None = None) -> LearnResult:
    """BFGS over the free scalar weights, full training set each step."""
    opts = options or LearnOptions()
    names = [n for n in template.weight_names() if n in init]
    if not names:
        raise ValueError("init contains no learnable weights of this template")
    oracle = PairOracle(template, pairs, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol,
                        solve_max_iter=opts.solve_max_iter)
    return _bfgs_engine(oracle, _LogMap(names), init, opts,
                        FullSampler(oracle.size))


# ----------------------------------------------------------------------
# direct scans and derivative checks


@dataclass
class GridResult:
    name: str
    values: Array
    costs: Array
    best_value: float
    best_cost: float


def grid_search(template: ProblemTemplate, pairs, name: str, values,
                base: Mapping[str, float] | None = None,
                options: LearnOptions | None = None) -> GridResult:
    """Mean tracking cost along one weight axis, warm-started in order."""
    opts = options or LearnOptions()
    oracle = PairOracle(template, pairs, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol,
                        solve_max_iter=opts.solve_max_iter)
    values = np.asarray(list(values), dtype=float)
    costs = []
    for v in values:
        params = dict(base or {})
        params[name] = float(v)
        costs.append(float(oracle.costs(params, range(oracle.size)).mean()))
    costs = np.array(costs)
    k = int(np.argmin(costs))
    return GridResult(name=name, values=values, costs=costs,
                      best_value=float(values[k]), best_cost=float(costs[k]))


def check_gradient(template: ProblemTemplate, pairs, params: Mapping[str, float],
                   names: Sequence[str] | None = None, rel_step: float = 1e-4,
                   solve_tol: float = 1e-11, solve_atol: float = 1e-12,
                   seed: int = 0) -> dict[str, dict[str, float]]:
    """Adjoint gradients vs central finite differences of the mean cost.

    Spatial (array-valued) weights are checked along one random direction.
    """
    opts = LearnOptions(solve_tol=solve_tol, solve_atol=solve_atol)
    oracle = PairOracle(template, pairs, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol)
    all_idx = range(oracle.size)
    if names is None:
        names = [n for n in template.weight_names() if n in params]
    costs, grads = oracle.costs_and_grads(params, all_idx)
    base_cost = float(costs.mean())
    rng = np.random.default_rng(seed)
    report: dict[str, dict[str, float]] = {}
    for name in names:
        value = params[name]
        gmean = sum(np.asarray(g[name], dtype=float) for g in grads) / oracle.size

        if isinstance(value, (np.ndarray, ImageGrid)):
            arr = value.values if isinstance(value, ImageGrid) else value
            direction = rng.standard_normal(arr.shape)
            delta = rel_step * max(float(np.max(np.abs(arr))), 1.0)
            adj = float(np.sum(gmean * direction))

            def at(vv):
                p = dict(params)
                p[name] = vv
                return float(oracle.costs(p, all_idx).mean())

            fd = (at(arr + delta * direction) - at(arr - delta * direction)) / (2 * delta)
        else:
            adj = float(gmean)
            delta = rel_step * max(abs(float(value)), 1.0)

            def at(vv):
                p = dict(params)
                p[name] = vv
                return float(oracle.costs(p, all_idx).mean())

            fd = (at(float(value) + delta) - at(float(value) - delta)) / (2 * delta)
        denom = max(abs(fd), abs(adj), 1e-300)
        report[name] = {"adjoint": adj, "fd": fd,
                        "rel_error": abs(adj - fd) / denom,
                        "cost": base_cost, "step": delta}
    return report


# ----------------------------------------------------------------------
# spatially varying weights


@dataclass
class SpatialOptions:
    max_iter: int = 60
    gtol: float = 1e-4
    ftol: float = 1e-9
    floor: float = 1e-3
    step_min: float = 1e-12
    step_max: float = 1e12
    armijo: float = 1e-4
    shrink: float = 0.5
    max_linesearch: int = 25
    # H1 smoothing length^2 of the gradient field; 0 disables. Larger values
    # push the steps toward the constant subspace, taming the tendency of a
    # pixelwise weight to chase one noise realization.
    smoothing: float = 0.0
    solve_tol: float = 1e-7
    solve_atol: float = 0.0
    solve_max_iter: int = 100


@dataclass
class SpatialLearnResult:
    weight: ImageGrid
    cost: float
    iterations: int
    status: str
    converged: bool
    solves: int
    history: list[dict]


def learn_spatial(template: ProblemTemplate, pairs, name: str,
                  init: ImageGrid, options: SpatialOptions | None = None) -> SpatialLearnResult:
    """Projected spectral gradient descent on one pixelwise weight map.

    The weight stays above opts.floor; steps use the Barzilai-Borwein scale
    with a projected Armijo backtracking safeguard.
    """
    opts = options or SpatialOptions()
    oracle = PairOracle(template, pairs, solve_tol=opts.solve_tol,
                        solve_atol=opts.solve_atol,
                        solve_max_iter=opts.solve_max_iter)
    all_idx = range(oracle.size)
    h = init.h
    boundary = init.boundary

    def project(w):
        return np.maximum(w, opts.floor)

    def fg(w):
        params = {name: ImageGrid(w, h=h, boundary=boundary)}
        costs, grads = oracle.costs_and_grads(params, all_idx)
        g = sum(np.asarray(gr[name], dtype=float) for gr in grads) / oracle.size
        return float(costs.mean()), g

    if opts.smoothing > 0.0:
        L = stiffness_matrix(init.shape, h, boundary)
        lu = spla.splu((sp.identity(L.shape[0], format="csc")
                        + opts.smoothing * L).tocsc())

        def descent_field(g):
            return lu.solve(g.ravel()).reshape(g.shape)
    else:
        def descent_field(g):
            return g

    w = project(init.values.copy())
    fval, g = fg(w)
    gs = descent_field(g)
    # stationarity on the box: the projected gradient step must be small
    pg0 = float(np.linalg.norm(w - project(w - g)))
    step = 1.0 / max(float(np.max(np.abs(gs))), 1e-12)
    history = [{"iteration": 0, "cost": fval, "pg": pg0}]
    status = "maxiter"
    it = 0
    while it < opts.max_iter:
        pg = float(np.linalg.norm(w - project(w - g)))
        if pg <= opts.gtol * max(pg0, 1e-300):
            status = "gtol"
            break
        t = float(np.clip(step, opts.step_min, opts.step_max))
        accepted = False
        for _ in range(opts.max_linesearch + 1):
            w_new = project(w - t * gs)
            d = w_new - w
            # slope against the raw gradient: the smoothed field is an SPD
            # image of it, so the step stays a descent direction
            gd = float(np.sum(g * d))
            if gd >= 0.0:
                break
            f_new = float(oracle.costs(
                {name: ImageGrid(w_new, h=h, boundary=boundary)}, all_idx).mean())
            if f_new <= fval + opts.armijo * gd:
                accepted = True
                break
            t *= opts.shrink
        if not accepted:
            status = "linesearch"
            break
        f_prev = fval
        fval, g_new = fg(w_new)
        gs_new = descent_field(g_new)
        s = (w_new - w).ravel()
        z = (gs_new - gs).ravel()
        sz = float(s @ z)
        step = float(s @ s) / sz if sz > 0 else step * 2.0
        w, g, gs = w_new, g_new, gs_new
        it += 1
        history.append({"iteration": it, "cost": fval,
                        "pg": float(np.linalg.norm(w - project(w - g)))})
        if abs(f_prev - fval) <= opts.ftol * max(1.0, abs(f_prev)):
            status = "ftol"
            break
    return SpatialLearnResult(
        weight=ImageGrid(w, h=h, boundary=boundary), cost=fval,
        iterations=it, status=status, converged=status in ("gtol", "ftol"),
        solves=oracle.solves, history=history)
