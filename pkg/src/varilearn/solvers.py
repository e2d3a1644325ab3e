"""Globalized primal-dual semismooth Newton solvers for the denoising models.

All models share one driver: assemble the strong-form optimality residual,
take a Newton step on the primal blocks using the pixelwise derivative
kernels of the huberised terms, damp the step with a monotone energy line
search, and update the dual iterates with the same damping. The Newton
kernels use the infeasible-dual modification (the rank-one factor is bounded
by the dual feasibility radius), which keeps the linearization solvable far
from the solution and coincides with the exact derivative once the duals are
feasible. Solvers return the final assembled linearization so the adjoint
problem can reuse its transpose.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import huber
from .fidelity import FidelityKind, FidelityModel, phi_density
from .grids import (Boundary, ImageGrid, VectorField, _dx, _dxt, _dy, _dyt,
                    diff_matrices, stiffness_matrix)
from .problems import (Combine, DenoiseProblem, DenoiseResult, Linearization,
                       RegKind, Regularizer, SolverError)

Array = np.ndarray
SQRT2 = math.sqrt(2.0)


# Structural sparse operators, cached by grid signature. Dx/Dy come from
# grids.diff_matrices and match the matrix-free stencils exactly.

@lru_cache(maxsize=32)
def _grad_matrix(shape, h, boundary):
    Dx, Dy = diff_matrices(shape, h, boundary)
    return sp.vstack([Dx, Dy], format="csr")


@lru_cache(maxsize=32)
def _second_matrix(shape, h, boundary):
    # forward-forward second differences, mixed entry carries sqrt(2) so the
    # Frobenius norm of the hessian becomes the euclidean norm of 3 channels
    Dx, Dy = diff_matrices(shape, h, boundary)
    return sp.vstack([Dx @ Dx, SQRT2 * (Dx @ Dy), Dy @ Dy], format="csr")


@lru_cache(maxsize=32)
def _symgrad_matrix(shape, h, boundary):
    Dx, Dy = diff_matrices(shape, h, boundary)
    s = 1.0 / SQRT2
    return sp.bmat([[Dx, None], [s * Dy, s * Dx], [None, Dy]], format="csr")


@lru_cache(maxsize=32)
def _tgv_coupling(shape, h, boundary):
    n = shape[0] * shape[1]
    G = _grad_matrix(shape, h, boundary)
    E = _symgrad_matrix(shape, h, boundary)
    A1 = sp.hstack([G, -sp.identity(2 * n, format="csr")], format="csr")
    A2 = sp.hstack([sp.csr_matrix((3 * n, n)), E], format="csr")
    return A1, A2


def _block_matrix(W: Array) -> sp.csr_matrix:
    """(m, m, ny, nx) pixel blocks -> sparse (m*N, m*N) block-diagonal-ish."""
    m = W.shape[0]
    rows = [[sp.diags(W[a, b].ravel()) for b in range(m)] for a in range(m)]
    return sp.bmat(rows, format="csr")


def _sandwich(A: sp.spmatrix, W: Array) -> sp.csr_matrix:
    return (A.T @ _block_matrix(W) @ A).tocsr()


def _apply_blocks(W: Array, dz: Array) -> Array:
    return np.einsum("ab...,b...->a...", W, dz)


def _rescale_dual(q: Array, w_new, w_old) -> Array:
    # warm-started duals are scaled to the new weight so the modification
    # starts near-feasible; zero old weights reset the dual
    new = np.asarray(w_new, dtype=float)
    old = np.asarray(w_old, dtype=float)
    ratio = np.divide(new, old, out=np.zeros(np.broadcast(new, old).shape),
                      where=old > 0)
    return q * ratio


def _sparse_solve(J: sp.spmatrix, rhs: Array, iteration: int) -> Array:
    try:
        x = spla.splu(J.tocsc()).solve(rhs)
        if np.all(np.isfinite(x)):
            return x
    except RuntimeError:
        pass
    # Krylov fallback for (near-)singular factorizations
    try:
        x, info = spla.lgmres(J, rhs, rtol=1e-10, atol=0.0, maxiter=2000)
    except TypeError:  # older scipy spells the kwarg 'tol'
        x, info = spla.lgmres(J, rhs, tol=1e-10, atol=0.0, maxiter=2000)
    if info == 0 and np.all(np.isfinite(x)):
        return x
    raise SolverError("Newton system could not be solved", iteration)


class _Fid:
    """Unpacked weighted fidelity entry of a weighted-sum model."""

    __slots__ = ("name", "lam", "kind", "f", "gamma", "l1", "dual_key", "spatial")

    def __init__(self, idx: int, weight, model: FidelityModel):
        self.name = f"lam{idx + 1}"
        self.spatial = isinstance(weight, ImageGrid)
        self.lam = weight.values if self.spatial else float(weight)
        self.kind = model.kind
        self.f = model.data.values
        self.gamma = model.gamma
        self.l1 = model.kind is FidelityKind.IMPULSE_L1
        self.dual_key = f"fid{idx + 1}" if self.l1 else None


class _ModelBase:
    def __init__(self, problem: DenoiseProblem):
        self.problem = problem
        self.shape = problem.shape
        self.h = problem.h
        self.boundary = problem.boundary
        self.dir = problem.boundary is Boundary.DIRICHLET0
        self.mu = problem.mu
        self.gamma = problem.gamma
        self.n = self.shape[0] * self.shape[1]
        self.u_slice = slice(0, self.n)
        self.Dx, self.Dy = diff_matrices(self.shape, self.h, self.boundary)
        self.L = stiffness_matrix(self.shape, self.h, self.boundary)

    def newton_system(self, x, duals, G, cache):
        """(matrix, huber blocks, rhs) of the Newton step; models whose
        stationarity system differs from the energy gradient override this."""
        J, Hinfo = self.jacobian(x, duals, cache)
        return J, Hinfo, -G

    def _grad(self, a: Array) -> Array:
        return np.stack([_dx(a, self.h, self.dir), _dy(a, self.h, self.dir)])

    def _graddot(self, z: Array) -> Array:
        # adjoint of _grad: gradient transpose = minus divergence
        return _dxt(z[0], self.h, self.dir) + _dyt(z[1], self.h, self.dir)

    def _stiff(self, a: Array) -> Array:
        return self._graddot(self._grad(a))


class _TvModel(_ModelBase):
    """TV regularizer with weighted data terms and optional positivity penalty."""

    kind = "tv"

    def __init__(self, problem: DenoiseProblem):
        super().__init__(problem)
        self.alpha = problem.regularizer.weights[0]
        self.fids = [_Fid(i, w, m) for i, (w, m) in enumerate(problem.fidelities)]
        self.pos = problem.positivity
        self.nd = self.n
        self._poisson = [f for f in self.fids if f.kind is FidelityKind.POISSON_KL]

    def initial(self, warm):
        if warm is not None:
            x = warm["x"].copy()
            duals = {k: v.copy() for k, v in warm["duals"].items()}
            wts = warm["weights"]
            duals["reg"] = _rescale_dual(duals["reg"], self.alpha, wts["reg"])
            for fid in self.fids:
                if fid.dual_key is not None and fid.dual_key in duals:
                    duals[fid.dual_key] = _rescale_dual(
                        duals[fid.dual_key], fid.lam, wts[fid.dual_key])
            return x, duals
        u0 = self.fids[0].f.copy()
        if self._poisson:
            floor = self.pos.delta if self.pos is not None else 1e-3
            u0 = np.maximum(u0, floor)
        duals = {"reg": np.zeros((2,) + self.shape)}
        for fid in self.fids:
            if fid.dual_key is not None:
                duals[fid.dual_key] = np.zeros((1,) + self.shape)
        return u0.ravel(), duals

    def weight_snapshot(self):
        snap = {"reg": self.alpha}
        for fid in self.fids:
            if fid.dual_key is not None:
                snap[fid.dual_key] = fid.lam
        return snap

    def _domain_ok(self, u: Array) -> bool:
        # the log barrier only exists where counts are positive
        return all(not np.any((u <= 0.0) & (fid.f > 0.0)) for fid in self._poisson)

    def residual(self, x):
        u = x.reshape(self.shape)
        z = self._grad(u)
        hg = huber.hgamma(z, self.gamma)
        G = self.mu * self._graddot(z)
        if self.alpha > 0:
            G = G + self.alpha * self._graddot(hg)
        cache = {"u": u, "z": z, "hg": hg, "fid": []}
        for fid in self.fids:
            _, grad, hess = phi_density(fid.kind, fid.f, u, fid.gamma)
            cache["fid"].append((grad, hess))
            G = G + fid.lam * grad
        if self.pos is not None:
            active = u < self.pos.delta
            cache["pos_active"] = active
            G = G + self.pos.eta * np.where(active, u, 0.0)
        return G.ravel(), cache

    def energy(self, x):
        u = x.reshape(self.shape)
        if not self._domain_ok(u):
            return np.inf
        z = self._grad(u)
        e = 0.5 * self.mu * float(np.sum(z * z))
        if self.alpha > 0:
            e += self.alpha * float(np.sum(huber.huber(z, self.gamma)))
        for fid in self.fids:
            density = phi_density(fid.kind, fid.f, u, fid.gamma)[0]
            e += float(np.sum(fid.lam * density))
        if self.pos is not None:
            e += 0.5 * self.pos.eta * float(np.sum(np.square(np.minimum(u, self.pos.delta))))
        return self.h ** 2 * e

    def jacobian(self, x, duals, cache, modified=True):
        u = cache["u"]
        W = self.alpha * huber.newton_blocks(cache["z"], duals["reg"],
                                             self.alpha, self.gamma, modified)
        J = self.mu * self.L + _sandwich(_grad_matrix(self.shape, self.h, self.boundary), W)
        diag = np.zeros(self.shape)
        Hinfo = {"reg": W}
        for fid, (_, hess) in zip(self.fids, cache["fid"]):
            if fid.l1:
                t = (u - fid.f)[None]
                Hn = fid.lam * huber.newton_blocks(t, duals[fid.dual_key],
                                                   fid.lam, fid.gamma, modified)
                Hinfo[fid.dual_key] = Hn
                diag = diag + Hn[0, 0]
            else:
                diag = diag + fid.lam * hess
        if self.pos is not None:
            diag = diag + self.pos.eta * cache["pos_active"]
        J = (J + sp.diags(diag.ravel())).tocsr()
        return J, Hinfo

    def dual_step(self, duals, cache, Hinfo, dx, s):
        du = dx.reshape(self.shape)
        dz = self._grad(du)
        out = {}
        q = duals["reg"]
        out["reg"] = q + s * (-q + self.alpha * cache["hg"] + _apply_blocks(Hinfo["reg"], dz))
        for fid in self.fids:
            if fid.dual_key is None:
                continue
            t = (cache["u"] - fid.f)[None]
            hgn = huber.hgamma(t, fid.gamma)
            r = duals[fid.dual_key]
            out[fid.dual_key] = r + s * (-r + fid.lam * hgn + Hinfo[fid.dual_key][0, 0][None] * du[None])
        return out

    def mod_gap(self, duals, cache):
        gap = 0.0
        if self.alpha > 0:
            Hm = huber.newton_blocks(cache["z"], duals["reg"], self.alpha, self.gamma, True)
            Hu = huber.newton_blocks(cache["z"], duals["reg"], self.alpha, self.gamma, False)
            gap = max(gap, float(np.max(np.abs(Hm - Hu))))
        for fid in self.fids:
            if fid.dual_key is None:
                continue
            t = (cache["u"] - fid.f)[None]
            Hm = huber.newton_blocks(t, duals[fid.dual_key], fid.lam, fid.gamma, True)
            Hu = huber.newton_blocks(t, duals[fid.dual_key], fid.lam, fid.gamma, False)
            gap = max(gap, float(np.max(np.abs(Hm - Hu))))
        return gap

    def dparams(self, x, cache):
        out = {}
        for fid, (grad, _) in zip(self.fids, cache["fid"]):
            if not fid.spatial:
                out[fid.name] = grad.ravel()
        out["alpha1"] = self._graddot(cache["hg"]).ravel()
        return out

    def spatial_integrands(self, x, cache):
        out = {}
        for fid, (grad, _) in zip(self.fids, cache["fid"]):
            if fid.spatial:
                out[fid.name] = grad.copy()
        return out

    def pack(self, x, duals, cache):
        u = ImageGrid(cache["u"].copy(), h=self.h, boundary=self.boundary)
        exact = {"reg": self.alpha * cache["hg"]}
        bounds = {"reg": self.alpha}
        for fid in self.fids:
            if fid.dual_key is not None:
                t = (cache["u"] - fid.f)[None]
                exact[fid.dual_key] = fid.lam * huber.hgamma(t, fid.gamma)
                bounds[fid.dual_key] = fid.lam
        info = {}
        if self.pos is not None:
            info["active_set_size"] = int(np.count_nonzero(cache["pos_active"]))
        warm = {"kind": self.kind, "x": x.copy(),
                "duals": {k: v.copy() for k, v in duals.items()},
                "weights": self.weight_snapshot()}
        return u, exact, bounds, {}, warm, info


class _TgvModel(_ModelBase):
    """Second-order regularizer: alpha1*|grad v - w| + alpha2*|sym grad w|."""

    kind = "tgv2"

    def __init__(self, problem: DenoiseProblem):
        super().__init__(problem)
        self.a1, self.a2 = problem.regularizer.weights
        self.fids = [_Fid(i, w, m) for i, (w, m) in enumerate(problem.fidelities)]
        for fid in self.fids:
            if fid.kind is not FidelityKind.GAUSSIAN_L2:
                raise ValueError("tgv2 solver supports gaussian data terms only")
        self.nd = 3 * self.n
        self.A1, self.A2 = _tgv_coupling(self.shape, self.h, self.boundary)

    def initial(self, warm):
        if warm is not None:
            x = warm["x"].copy()
            duals = {k: v.copy() for k, v in warm["duals"].items()}
            wts = warm["weights"]
            duals["reg1"] = _rescale_dual(duals["reg1"], self.a1, wts["reg1"])
            duals["reg2"] = _rescale_dual(duals["reg2"], self.a2, wts["reg2"])
            return x, duals
        x = np.concatenate([self.fids[0].f.ravel(), np.zeros(2 * self.n)])
        return x, {"reg1": np.zeros((2,) + self.shape),
                   "reg2": np.zeros((3,) + self.shape)}

    def weight_snapshot(self):
        return {"reg1": self.a1, "reg2": self.a2}

    def _split(self, x):
        v = x[:self.n].reshape(self.shape)
        w1 = x[self.n:2 * self.n].reshape(self.shape)
        w2 = x[2 * self.n:].reshape(self.shape)
        return v, w1, w2

    def _z1(self, v, w1, w2):
        g = self._grad(v)
        return np.stack([g[0] - w1, g[1] - w2])

    def _z2(self, w1, w2):
        return np.stack([
            _dx(w1, self.h, self.dir),
            (_dy(w1, self.h, self.dir) + _dx(w2, self.h, self.dir)) / SQRT2,
            _dy(w2, self.h, self.dir),
        ])

    def residual(self, x):
        v, w1, w2 = self._split(x)
        z1 = self._z1(v, w1, w2)
        z2 = self._z2(w1, w2)
        h1 = huber.hgamma(z1, self.gamma)
        h2 = huber.hgamma(z2, self.gamma)
        q1 = self.a1 * h1
        q2 = self.a2 * h2
        Rv = self.mu * self._stiff(v) + self._graddot(q1)
        cache = {"v": v, "w1": w1, "w2": w2, "z1": z1, "z2": z2,
                 "h1": h1, "h2": h2, "fid": []}
        for fid in self.fids:
            _, grad, hess = phi_density(fid.kind, fid.f, v, fid.gamma)
            cache["fid"].append((grad, hess))
            Rv = Rv + fid.lam * grad
        Rw1 = (self.mu * self._stiff(w1) - q1[0]
               + _dxt(q2[0], self.h, self.dir) + _dyt(q2[1], self.h, self.dir) / SQRT2)
        Rw2 = (self.mu * self._stiff(w2) - q1[1]
               + _dxt(q2[1], self.h, self.dir) / SQRT2 + _dyt(q2[2], self.h, self.dir))
        return np.concatenate([Rv.ravel(), Rw1.ravel(), Rw2.ravel()]), cache

    def energy(self, x):
        v, w1, w2 = self._split(x)
        gv = self._grad(v)
        gw1 = self._grad(w1)
        gw2 = self._grad(w2)
        e = 0.5 * self.mu * float(np.sum(gv * gv) + np.sum(gw1 * gw1) + np.sum(gw2 * gw2))
        e += self.a1 * float(np.sum(huber.huber(self._z1(v, w1, w2), self.gamma)))
        e += self.a2 * float(np.sum(huber.huber(self._z2(w1, w2), self.gamma)))
        for fid in self.fids:
            e += float(np.sum(fid.lam * phi_density(fid.kind, fid.f, v, fid.gamma)[0]))
        return self.h ** 2 * e

    def jacobian(self, x, duals, cache, modified=True):
        W1 = self.a1 * huber.newton_blocks(cache["z1"], duals["reg1"],
                                           self.a1, self.gamma, modified)
        W2 = self.a2 * huber.newton_blocks(cache["z2"], duals["reg2"],
                                           self.a2, self.gamma, modified)
        diag = np.zeros(self.shape)
        for fid, (_, hess) in zip(self.fids, cache["fid"]):
            diag = diag + fid.lam * hess
        smooth = sp.block_diag([
            self.mu * self.L + sp.diags(diag.ravel()),
            self.mu * self.L,
            self.mu * self.L,
        ])
        J = (smooth + _sandwich(self.A1, W1) + _sandwich(self.A2, W2)).tocsr()
        return J, {"reg1": W1, "reg2": W2}

    def dual_step(self, duals, cache, Hinfo, dx, s):
        dv, dw1, dw2 = self._split(dx)
        dz1 = self._z1(dv, dw1, dw2)
        dz2 = self._z2(dw1, dw2)
        q1, q2 = duals["reg1"], duals["reg2"]
        return {
            "reg1": q1 + s * (-q1 + self.a1 * cache["h1"] + _apply_blocks(Hinfo["reg1"], dz1)),
            "reg2": q2 + s * (-q2 + self.a2 * cache["h2"] + _apply_blocks(Hinfo["reg2"], dz2)),
        }

    def mod_gap(self, duals, cache):
        gap = 0.0
        for z, key, a in ((cache["z1"], "reg1", self.a1), (cache["z2"], "reg2", self.a2)):
            if a <= 0:
                continue
            Hm = huber.newton_blocks(z, duals[key], a, self.gamma, True)
            Hu = huber.newton_blocks(z, duals[key], a, self.gamma, False)
            gap = max(gap, float(np.max(np.abs(Hm - Hu))))
        return gap

    def dparams(self, x, cache):
        h1, h2 = cache["h1"], cache["h2"]
        da1 = np.concatenate([self._graddot(h1).ravel(),
                              (-h1[0]).ravel(), (-h1[1]).ravel()])
        bw1 = _dxt(h2[0], self.h, self.dir) + _dyt(h2[1], self.h, self.dir) / SQRT2
        bw2 = _dxt(h2[1], self.h, self.dir) / SQRT2 + _dyt(h2[2], self.h, self.dir)
        da2 = np.concatenate([np.zeros(self.n), bw1.ravel(), bw2.ravel()])
        out = {"alpha1": da1, "alpha2": da2}
        for fid, (grad, _) in zip(self.fids, cache["fid"]):
            if not fid.spatial:
                out[fid.name] = np.concatenate([grad.ravel(), np.zeros(2 * self.n)])
        return out

    def spatial_integrands(self, x, cache):
        return {fid.name: grad.copy()
                for fid, (grad, _) in zip(self.fids, cache["fid"]) if fid.spatial}

    def pack(self, x, duals, cache):
        u = ImageGrid(cache["v"].copy(), h=self.h, boundary=self.boundary)
        exact = {"reg1": self.a1 * cache["h1"], "reg2": self.a2 * cache["h2"]}
        bounds = {"reg1": self.a1, "reg2": self.a2}
        aux = {"w": VectorField(cache["w1"].copy(), cache["w2"].copy(),
                                h=self.h, boundary=self.boundary)}
        warm = {"kind": self.kind, "x": x.copy(),
                "duals": {k: v.copy() for k, v in duals.items()},
                "weights": self.weight_snapshot()}
        return u, exact, bounds, aux, warm, {}


class _IctvModel(_ModelBase):
    """Infimal convolution of first- and second-order TV in variables (u, v)."""

    kind = "ictv"

    def __init__(self, problem: DenoiseProblem):
        super().__init__(problem)
        self.a1, self.a2 = problem.regularizer.weights
        self.fids = [_Fid(i, w, m) for i, (w, m) in enumerate(problem.fidelities)]
        for fid in self.fids:
            if fid.kind is not FidelityKind.GAUSSIAN_L2:
                raise ValueError("ictv solver supports gaussian data terms only")
        self.nd = 2 * self.n
        self.B = _second_matrix(self.shape, self.h, self.boundary)
        self.G = _grad_matrix(self.shape, self.h, self.boundary)

    def initial(self, warm):
        if warm is not None:
            x = warm["x"].copy()
            duals = {k: v.copy() for k, v in warm["duals"].items()}
            wts = warm["weights"]
            duals["reg1"] = _rescale_dual(duals["reg1"], self.a1, wts["reg1"])
            duals["reg2"] = _rescale_dual(duals["reg2"], self.a2, wts["reg2"])
            return x, duals
        x = np.concatenate([self.fids[0].f.ravel(), np.zeros(self.n)])
        return x, {"reg1": np.zeros((2,) + self.shape),
                   "reg2": np.zeros((3,) + self.shape)}

    def weight_snapshot(self):
        return {"reg1": self.a1, "reg2": self.a2}

    def _split(self, x):
        return x[:self.n].reshape(self.shape), x[self.n:].reshape(self.shape)

    def _second(self, v):
        dxv = _dx(v, self.h, self.dir)
        dyv = _dy(v, self.h, self.dir)
        return np.stack([
            _dx(dxv, self.h, self.dir),
            SQRT2 * _dy(dxv, self.h, self.dir),
            _dy(dyv, self.h, self.dir),
        ])

    def _second_t(self, t):
        b1 = _dxt(_dxt(t[0], self.h, self.dir), self.h, self.dir)
        b2 = SQRT2 * _dyt(_dxt(t[1], self.h, self.dir), self.h, self.dir)
        b3 = _dyt(_dyt(t[2], self.h, self.dir), self.h, self.dir)
        return b1 + b2 + b3

    def residual(self, x):
        u, v = self._split(x)
        z1 = self._grad(u) - self._grad(v)
        z2 = self._second(v)
        h1 = huber.hgamma(z1, self.gamma)
        h2 = huber.hgamma(z2, self.gamma)
        q1 = self.a1 * h1
        q2 = self.a2 * h2
        Ru = self.mu * self._stiff(u) + self._graddot(q1)
        cache = {"u": u, "v": v, "z1": z1, "z2": z2, "h1": h1, "h2": h2, "fid": []}
        for fid in self.fids:
            _, grad, hess = phi_density(fid.kind, fid.f, u, fid.gamma)
            cache["fid"].append((grad, hess))
            Ru = Ru + fid.lam * grad
        Rv = self.mu * self._stiff(v) - self._graddot(q1) + self._second_t(q2)
        return np.concatenate([Ru.ravel(), Rv.ravel()]), cache

    def energy(self, x):
        u, v = self._split(x)
        gu = self._grad(u)
        gv = self._grad(v)
        e = 0.5 * self.mu * float(np.sum(gu * gu) + np.sum(gv * gv))
        e += self.a1 * float(np.sum(huber.huber(gu - gv, self.gamma)))
        e += self.a2 * float(np.sum(huber.huber(self._second(v), self.gamma)))
        for fid in self.fids:
            e += float(np.sum(fid.lam * phi_density(fid.kind, fid.f, u, fid.gamma)[0]))
        return self.h ** 2 * e

    def jacobian(self, x, duals, cache, modified=True):
        W1 = self.a1 * huber.newton_blocks(cache["z1"], duals["reg1"],
                                           self.a1, self.gamma, modified)
        W2 = self.a2 * huber.newton_blocks(cache["z2"], duals["reg2"],
                                           self.a2, self.gamma, modified)
        Q1 = _sandwich(self.G, W1)
        Q2 = _sandwich(self.B, W2)
        diag = np.zeros(self.shape)
        for fid, (_, hess) in zip(self.fids, cache["fid"]):
            diag = diag + fid.lam * hess
        Juu = self.mu * self.L + sp.diags(diag.ravel()) + Q1
        Jvv = self.mu * self.L + Q1 + Q2
        # the constant v-mode is invisible to every term under Neumann
        # closures; a tiny shift keeps the factorization nonsingular
        shift = 1e-12 * max(1.0, float(np.max(np.abs(Jvv.diagonal()))))
        Jvv = Jvv + shift * sp.identity(self.n)
        J = sp.bmat([[Juu, -Q1], [-Q1, Jvv]], format="csr")
        return J, {"reg1": W1, "reg2": W2}

    def dual_step(self, duals, cache, Hinfo, dx, s):
        du, dv = self._split(dx)
        dz1 = self._grad(du) - self._grad(dv)
        dz2 = self._second(dv)
        q1, q2 = duals["reg1"], duals["reg2"]
        return {
            "reg1": q1 + s * (-q1 + self.a1 * cache["h1"] + _apply_blocks(Hinfo["reg1"], dz1)),
            "reg2": q2 + s * (-q2 + self.a2 * cache["h2"] + _apply_blocks(Hinfo["reg2"], dz2)),
        }

    def mod_gap(self, duals, cache):
        gap = 0.0
        for z, key, a in ((cache["z1"], "reg1", self.a1), (cache["z2"], "reg2", self.a2)):
            if a <= 0:
                continue
            Hm = huber.newton_blocks(z, duals[key], a, self.gamma, True)
            Hu = huber.newton_blocks(z, duals[key], a, self.gamma, False)
            gap = max(gap, float(np.max(np.abs(Hm - Hu))))
        return gap

    def dparams(self, x, cache):
        g1 = self._graddot(cache["h1"])
        da1 = np.concatenate([g1.ravel(), (-g1).ravel()])
        da2 = np.concatenate([np.zeros(self.n), self._second_t(cache["h2"]).ravel()])
        out = {"alpha1": da1, "alpha2": da2}
        for fid, (grad, _) in zip(self.fids, cache["fid"]):
            if not fid.spatial:
                out[fid.name] = np.concatenate([grad.ravel(), np.zeros(self.n)])
        return out

    def spatial_integrands(self, x, cache):
        return {fid.name: grad.copy()
                for fid, (grad, _) in zip(self.fids, cache["fid"]) if fid.spatial}

    def pack(self, x, duals, cache):
        u = ImageGrid(cache["u"].copy(), h=self.h, boundary=self.boundary)
        exact = {"reg1": self.a1 * cache["h1"], "reg2": self.a2 * cache["h2"]}
        bounds = {"reg1": self.a1, "reg2": self.a2}
        aux = {"v": ImageGrid(cache["v"].copy(), h=self.h, boundary=self.boundary)}
        warm = {"kind": self.kind, "x": x.copy(),
                "duals": {k: v.copy() for k, v in duals.items()},
                "weights": self.weight_snapshot()}
        return u, exact, bounds, aux, warm, {}


class _InfconvModel(_ModelBase):
    """Impulse/Gaussian split f ~ u + n: TV on u, huberised L1 on n, L2 coupling."""

    kind = "infconv"

    def __init__(self, problem: DenoiseProblem):
        super().__init__(problem)
        self.alpha = problem.regularizer.weights[0]
        (w1, m1), (w2, m2) = problem.fidelities
        if m1.kind is not FidelityKind.IMPULSE_L1 or m2.kind is not FidelityKind.GAUSSIAN_L2:
            raise ValueError("inf-conv model takes (l1, gaussian) data terms")
        if isinstance(w1, ImageGrid) or isinstance(w2, ImageGrid):
            raise ValueError("inf-conv weights must be scalars")
        self.lam1 = float(w1)
        self.lam2 = float(w2)
        self.fid_gamma = m1.gamma
        if not np.isfinite(self.fid_gamma):
            raise ValueError("inf-conv L1 term needs a finite huber parameter")
        self.f = m2.data.values
        self.nd = 2 * self.n
        self.G = _grad_matrix(self.shape, self.h, self.boundary)

    def initial(self, warm):
        if warm is not None:
            x = warm["x"].copy()
            duals = {k: v.copy() for k, v in warm["duals"].items()}
            wts = warm["weights"]
            duals["reg"] = _rescale_dual(duals["reg"], self.alpha, wts["reg"])
            duals["fid1"] = _rescale_dual(duals["fid1"], self.lam1, wts["fid1"])
            return x, duals
        x = np.concatenate([self.f.ravel(), np.zeros(self.n)])
        return x, {"reg": np.zeros((2,) + self.shape),
                   "fid1": np.zeros((1,) + self.shape)}

    def weight_snapshot(self):
        return {"reg": self.alpha, "fid1": self.lam1}

    def _split(self, x):
        return x[:self.n].reshape(self.shape), x[self.n:].reshape(self.shape)

    def residual(self, x):
        u, nimp = self._split(x)
        z = self._grad(u)
        hg = huber.hgamma(z, self.gamma)
        hgn = huber.hgamma(nimp[None], self.fid_gamma)
        resid = u + nimp - self.f
        Ru = self.mu * self._stiff(u) + self.alpha * self._graddot(hg) + self.lam2 * resid
        Rn = self.lam1 * hgn[0] + self.lam2 * resid
        cache = {"u": u, "n": nimp, "z": z, "hg": hg, "hgn": hgn, "resid": resid}
        return np.concatenate([Ru.ravel(), Rn.ravel()]), cache

    def energy(self, x):
        u, nimp = self._split(x)
        z = self._grad(u)
        e = 0.5 * self.mu * float(np.sum(z * z))
        e += self.alpha * float(np.sum(huber.huber(z, self.gamma)))
        e += self.lam1 * float(np.sum(huber.huber(nimp[None], self.fid_gamma)))
        r = u + nimp - self.f
        e += 0.5 * self.lam2 * float(np.sum(r * r))
        return self.h ** 2 * e

    def jacobian(self, x, duals, cache, modified=True):
        W = self.alpha * huber.newton_blocks(cache["z"], duals["reg"],
                                             self.alpha, self.gamma, modified)
        Hn = self.lam1 * huber.newton_blocks(cache["n"][None], duals["fid1"],
                                             self.lam1, self.fid_gamma, modified)
        Q = _sandwich(self.G, W)
        lam2I = self.lam2 * sp.identity(self.n)
        Juu = self.mu * self.L + Q + lam2I
        Jnn = sp.diags(Hn[0, 0].ravel()) + lam2I
        J = sp.bmat([[Juu, lam2I], [lam2I, Jnn]], format="csr")
        return J, {"reg": W, "fid1": Hn}

    def dual_step(self, duals, cache, Hinfo, dx, s):
        du, dn = self._split(dx)
        dz = self._grad(du)
        q = duals["reg"]
        r = duals["fid1"]
        return {
            "reg": q + s * (-q + self.alpha * cache["hg"] + _apply_blocks(Hinfo["reg"], dz)),
            "fid1": r + s * (-r + self.lam1 * cache["hgn"] + Hinfo["fid1"][0, 0][None] * dn[None]),
        }

    def mod_gap(self, duals, cache):
        gap = 0.0
        for z, key, a, g in ((cache["z"], "reg", self.alpha, self.gamma),
                             (cache["n"][None], "fid1", self.lam1, self.fid_gamma)):
            if a <= 0:
                continue
            Hm = huber.newton_blocks(z, duals[key], a, g, True)
            Hu = huber.newton_blocks(z, duals[key], a, g, False)
            gap = max(gap, float(np.max(np.abs(Hm - Hu))))
        return gap

    def dparams(self, x, cache):
        resid = cache["resid"].ravel()
        return {
            "lam1": np.concatenate([np.zeros(self.n), cache["hgn"][0].ravel()]),
            "lam2": np.concatenate([resid, resid]),
            "alpha1": np.concatenate([self._graddot(cache["hg"]).ravel(), np.zeros(self.n)]),
        }

    def spatial_integrands(self, x, cache):
        return {}

    def pack(self, x, duals, cache):
        u = ImageGrid(cache["u"].copy(), h=self.h, boundary=self.boundary)
        exact = {"reg": self.alpha * cache["hg"], "fid1": self.lam1 * cache["hgn"]}
        bounds = {"reg": self.alpha, "fid1": self.lam1}
        aux = {"n": ImageGrid(cache["n"].copy(), h=self.h, boundary=self.boundary)}
        warm = {"kind": self.kind, "x": x.copy(),
                "duals": {k: v.copy() for k, v in duals.items()},
                "weights": self.weight_snapshot()}
        return u, exact, bounds, aux, warm, {}


class _GaussPoissonModel(_ModelBase):
    """Mixed Gauss-Poisson likelihood; optimality system multiplied through by u."""

    kind = "gauss_poisson"

    def __init__(self, problem: DenoiseProblem):
        super().__init__(problem)
        self.alpha = problem.regularizer.weights[0]
        (w1, m1), (w2, m2) = problem.fidelities
        if m1.kind is not FidelityKind.GAUSSIAN_L2 or m2.kind is not FidelityKind.POISSON_KL:
            raise ValueError("gauss-poisson model takes (gaussian, poisson) data terms")
        if isinstance(w1, ImageGrid) or isinstance(w2, ImageGrid):
            raise ValueError("gauss-poisson weights must be scalars")
        self.lam1 = float(w1)
        self.lam2 = float(w2)
        self.f = m2.data.values
        self.nd = self.n
        self.G = _grad_matrix(self.shape, self.h, self.boundary)

    def initial(self, warm):
        if warm is not None:
            x = warm["x"].copy()
            duals = {k: v.copy() for k, v in warm["duals"].items()}
            duals["reg"] = _rescale_dual(duals["reg"], self.alpha, warm["weights"]["reg"])
            return x, duals
        u0 = np.maximum(self.f, 1e-3)
        return u0.ravel(), {"reg": np.zeros((2,) + self.shape)}

    def weight_snapshot(self):
        return {"reg": self.alpha}

    def _inner_residual(self, u, hg):
        return (self.mu * self._stiff(u) + self.alpha * self._graddot(hg)
                + self.lam1 * (u - self.f))

    def residual(self, x):
        u = x.reshape(self.shape)
        z = self._grad(u)
        hg = huber.hgamma(z, self.gamma)
        inner = self._inner_residual(u, hg)
        R = u * inner + self.lam2 * (u - self.f)
        cache = {"u": u, "z": z, "hg": hg, "inner": inner}
        return R.ravel(), cache

    def energy(self, x):
        u = x.reshape(self.shape)
        # complementarity form: u >= 0 everywhere, u > 0 wherever counts exist
        if np.any(u < 0.0) or np.any((u <= 0.0) & (self.f > 0.0)):
            return np.inf
        z = self._grad(u)
        e = 0.5 * self.mu * float(np.sum(z * z))
        e += self.alpha * float(np.sum(huber.huber(z, self.gamma)))
        r = u - self.f
        e += 0.5 * self.lam1 * float(np.sum(r * r))
        kl = np.where(self.f > 0.0, u - self.f * np.log(np.maximum(u, huber.EPS_NORM)), u)
        e += self.lam2 * float(np.sum(kl))
        return self.h ** 2 * e

    def jacobian(self, x, duals, cache, modified=True):
        u = cache["u"]
        W = self.alpha * huber.newton_blocks(cache["z"], duals["reg"],
                                             self.alpha, self.gamma, modified)
        Q = _sandwich(self.G, W)
        inner_jac = self.mu * self.L + Q + self.lam1 * sp.identity(self.n)
        J = (sp.diags(cache["inner"].ravel())
             + sp.diags(u.ravel()) @ inner_jac
             + self.lam2 * sp.identity(self.n)).tocsr()
        return J, {"reg": W}

    def newton_system(self, x, duals, G, cache):
        # steps come from the energy gradient system, whose Hessian stays
        # positive definite near u = 0 where the u-multiplied matrix loses
        # definiteness and sends Newton through the barrier
        u = cache["u"]
        counted = self.f > 0.0
        ratio = np.divide(self.f, u, out=np.zeros_like(u), where=counted)
        r = cache["inner"] + self.lam2 * (1.0 - ratio)
        W = self.alpha * huber.newton_blocks(cache["z"], duals["reg"],
                                             self.alpha, self.gamma, True)
        curv = np.divide(ratio, u, out=np.zeros_like(u), where=counted)
        J = (self.mu * self.L + _sandwich(self.G, W)
             + self.lam1 * sp.identity(self.n)
             + self.lam2 * sp.diags(curv.ravel())).tocsr()
        return J, {"reg": W}, -r.ravel()

    def dual_step(self, duals, cache, Hinfo, dx, s):
        du = dx.reshape(self.shape)
        dz = self._grad(du)
        q = duals["reg"]
        return {"reg": q + s * (-q + self.alpha * cache["hg"] + _apply_blocks(Hinfo["reg"], dz))}

    def mod_gap(self, duals, cache):
        if self.alpha <= 0:
            return 0.0
        Hm = huber.newton_blocks(cache["z"], duals["reg"], self.alpha, self.gamma, True)
        Hu = huber.newton_blocks(cache["z"], duals["reg"], self.alpha, self.gamma, False)
        return float(np.max(np.abs(Hm - Hu)))

    def dparams(self, x, cache):
        u = cache["u"]
        return {
            "lam1": (u * (u - self.f)).ravel(),
            "lam2": (u - self.f).ravel(),
            "alpha1": (u * self._graddot(cache["hg"])).ravel(),
        }

    def spatial_integrands(self, x, cache):
        return {}

    def pack(self, x, duals, cache):
        u = ImageGrid(cache["u"].copy(), h=self.h, boundary=self.boundary)
        exact = {"reg": self.alpha * cache["hg"]}
        bounds = {"reg": self.alpha}
        warm = {"kind": self.kind, "x": x.copy(),
                "duals": {k: v.copy() for k, v in duals.items()},
                "weights": self.weight_snapshot()}
        return u, exact, bounds, {}, warm, {}


def _make_model(problem: DenoiseProblem) -> _ModelBase:
    if problem.combine is Combine.INFCONV_L1L2:
        if problem.regularizer.kind is not RegKind.TV or len(problem.fidelities) != 2:
            raise ValueError("inf-conv model needs a TV regularizer and two data terms")
        return _InfconvModel(problem)
    if problem.combine is Combine.GAUSS_POISSON:
        if problem.regularizer.kind is not RegKind.TV or len(problem.fidelities) != 2:
            raise ValueError("gauss-poisson model needs a TV regularizer and two data terms")
        return _GaussPoissonModel(problem)
    if problem.positivity is not None and problem.regularizer.kind is not RegKind.TV:
        raise ValueError("positivity penalty is only supported with TV")
    if problem.regularizer.kind is RegKind.TV:
        return _TvModel(problem)
    if problem.regularizer.kind is RegKind.TGV2:
        return _TgvModel(problem)
    return _IctvModel(problem)


def _weighted_norm(vec: Array, h: float) -> float:
    return float(h * np.linalg.norm(vec))


def _run_ssn(model: _ModelBase, warm_payload, tol: float, atol: float,
             max_iter: int, max_linesearch: int = 20) -> DenoiseResult:
    def attempt(payload):
        x, duals = model.initial(payload)
        G, cache = model.residual(x)
        res = _weighted_norm(G, model.h)
        # the relative tolerance is anchored at the cold starting point, so a
        # warm start near the solution cannot shrink the target below reach
        scale = res
        if payload is not None:
            x_cold, _ = model.initial(None)
            G_cold, _ = model.residual(x_cold)
            scale = max(res, _weighted_norm(G_cold, model.h))
        threshold = max(atol, tol * scale)
        trace = [res]
        best = (res, x, duals)
        ls_events = 0
        it = 0
        stalled = False
        while res > threshold and it < max_iter:
            J, Hinfo, rhs = model.newton_system(x, duals, G, cache)
            dx = _sparse_solve(J, rhs, it)
            e0 = model.energy(x)
            slack = 1e-12 * max(1.0, abs(e0))
            step = 1.0
            for _ in range(max_linesearch + 1):
                if model.energy(x + step * dx) <= e0 + slack:
                    break
                step *= 0.5
            else:
                # no admissible step left; stop here rather than accept an
                # energy increase, the best-iterate bookkeeping takes over
                stalled = True
                break
            if step < 1.0:
                ls_events += 1
            duals = model.dual_step(duals, cache, Hinfo, dx, step)
            x = x + step * dx
            it += 1
            G, cache = model.residual(x)
            res = _weighted_norm(G, model.h)
            trace.append(res)
            if res < best[0]:
                best = (res, x, duals)
        converged = res <= threshold
        if not converged and best[0] < res:
            res, x, duals = best
            G, cache = model.residual(x)
        return x, duals, G, cache, res, trace, it, ls_events, stalled, converged

    state = attempt(warm_payload)
    if warm_payload is not None and state[8] and not state[9]:
        # a stale warm start can hand the globalized step an ascent
        # direction; the cold start is the reliable path, so redo from there
        state = attempt(None)
    x, duals, G, cache, res, trace, it, ls_events, stalled, converged = state
    # the adjoint transposes the same matrix the last Newton step used; at
    # tight tolerance the dual iterates are feasible and the modification
    # coincides with the exact derivative (gap reported as mod_gap)
    J_final, _ = model.jacobian(x, duals, cache)
    lin = Linearization(
        mat=J_final,
        shape=model.shape,
        h=model.h,
        u_slice=model.u_slice,
        dparams=model.dparams(x, cache),
        spatial_integrands=model.spatial_integrands(x, cache),
        mod_gap=model.mod_gap(duals, cache),
    )
    u, exact_duals, bounds, aux, warm, extra = model.pack(x, duals, cache)
    info = {"warm": warm, "ls_events": ls_events, "mod_gap": lin.mod_gap,
            "residual": res, "stalled": stalled}
    info.update(extra)
    return DenoiseResult(
        u=u, duals=exact_duals, dual_bounds=bounds, aux=aux, trace=trace,
        converged=converged, iterations=it, energy=model.energy(x),
        linearization=lin, info=info)


def _warm_payload(model: _ModelBase, warm_start) -> dict | None:
    if warm_start is None:
        return None
    payload = warm_start.info.get("warm") if isinstance(warm_start, DenoiseResult) else warm_start
    if not isinstance(payload, dict) or "x" not in payload:
        raise ValueError("warm_start must be a DenoiseResult of a compatible solve")
    if payload.get("kind") != model.kind or payload["x"].size != model.nd:
        raise ValueError("warm_start is incompatible with this problem")
    return payload


def solve(problem: DenoiseProblem, tol: float = 1e-7, atol: float = 0.0,
          max_iter: int = 100, warm_start=None) -> DenoiseResult:
    """Solve a denoising problem to relative residual tol (absolute atol)."""
    model = _make_model(problem)
    return _run_ssn(model, _warm_payload(model, warm_start), tol, atol, max_iter)


def solve_tv(problem: DenoiseProblem, tol: float = 1e-7, atol: float = 0.0,
             max_iter: int = 100, warm_start=None) -> DenoiseResult:
    if problem.regularizer.kind is not RegKind.TV or problem.combine is not Combine.WEIGHTED_SUM:
        raise ValueError("solve_tv expects a TV regularizer with weighted-sum data terms")
    return solve(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)


def solve_tgv2(problem: DenoiseProblem, tol: float = 1e-7, atol: float = 0.0,
               max_iter: int = 100, warm_start=None) -> DenoiseResult:
    if problem.regularizer.kind is not RegKind.TGV2:
        raise ValueError("solve_tgv2 expects a TGV2 regularizer")
    return solve(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)


def solve_ictv(problem: DenoiseProblem, tol: float = 1e-7, atol: float = 0.0,
               max_iter: int = 100, warm_start=None) -> DenoiseResult:
    if problem.regularizer.kind is not RegKind.ICTV:
        raise ValueError("solve_ictv expects an ICTV regularizer")
    return solve(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)


def solve_poisson_penalty(problem: DenoiseProblem, tol: float = 1e-7, atol: float = 0.0,
                          max_iter: int = 100, warm_start=None) -> DenoiseResult:
    if problem.positivity is None:
        raise ValueError("poisson penalty solve needs problem.positivity set")
    if not any(m.kind is FidelityKind.POISSON_KL for _, m in problem.fidelities):
        raise ValueError("poisson penalty solve needs a poisson data term")
    return solve_tv(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)


def infconv_problem(f: ImageGrid, lam1: float, lam2: float, *, alpha: float = 1.0,
                    mu: float = 1e-12, gamma: float = 1e3,
                    fid_gamma: float | None = None) -> DenoiseProblem:
    """Impulse+Gaussian decomposition problem for an observation f."""
    fg = gamma if fid_gamma is None else fid_gamma
    return DenoiseProblem(
        regularizer=Regularizer.tv(alpha),
        fidelities=[(lam1, FidelityModel(FidelityKind.IMPULSE_L1, f, fg)),
                    (lam2, FidelityModel(FidelityKind.GAUSSIAN_L2, f))],
        combine=Combine.INFCONV_L1L2, mu=mu, gamma=gamma)


def solve_infconv_l1l2(f: ImageGrid, lam1: float, lam2: float, *, alpha: float = 1.0,
                       mu: float = 1e-12, gamma: float = 1e3,
                       fid_gamma: float | None = None, tol: float = 1e-7,
                       atol: float = 0.0, max_iter: int = 100,
                       warm_start=None) -> DenoiseResult:
    problem = infconv_problem(f, lam1, lam2, alpha=alpha, mu=mu, gamma=gamma,
                              fid_gamma=fid_gamma)
    return solve(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)


def gauss_poisson_problem(f: ImageGrid, lam1: float, lam2: float, *, alpha: float = 1.0,
                          mu: float = 1e-12, gamma: float = 100.0) -> DenoiseProblem:
    return DenoiseProblem(
        regularizer=Regularizer.tv(alpha),
        fidelities=[(lam1, FidelityModel(FidelityKind.GAUSSIAN_L2, f)),
                    (lam2, FidelityModel(FidelityKind.POISSON_KL, f))],
        combine=Combine.GAUSS_POISSON, mu=mu, gamma=gamma)


def solve_gauss_poisson(f: ImageGrid, lam1: float, lam2: float, *, alpha: float = 1.0,
                        mu: float = 1e-12, gamma: float = 100.0, tol: float = 1e-7,
                        atol: float = 0.0, max_iter: int = 100,
                        warm_start=None) -> DenoiseResult:
    problem = gauss_poisson_problem(f, lam1, lam2, alpha=alpha, mu=mu, gamma=gamma)
    return solve(problem, tol=tol, atol=atol, max_iter=max_iter, warm_start=warm_start)
