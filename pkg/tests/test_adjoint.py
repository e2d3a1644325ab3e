"""Adjoint solves and the reduced gradients they produce."""
import warnings

import numpy as np
import pytest

from conftest import bump_image

from varilearn.adjoint import reduced_gradient, solve_adjoint, tracking_cost
from varilearn.fidelity import FidelityKind, FidelityModel
from varilearn.grids import ImageGrid
from varilearn.problems import DenoiseProblem, RegKind, Regularizer
from varilearn.solvers import solve, solve_tv


def make_pair(n=32, noise=0.1, seed=5):
    clean = bump_image(n)
    rng = np.random.default_rng(seed)
    noisy = ImageGrid(clean.values + rng.normal(0.0, noise, clean.shape), h=clean.h)
    return clean, noisy


def tv_problem(noisy, lam, mu=1e-2, gamma=100.0):
    return DenoiseProblem(
        regularizer=Regularizer(RegKind.TV, (1.0,)),
        fidelities=[(lam, FidelityModel(FidelityKind.GAUSSIAN_L2, noisy))],
        mu=mu, gamma=gamma)


def test_tracking_cost_hand_value():
    u = ImageGrid(np.array([[1.0, 2.0], [3.0, 4.0]]), h=0.5)
    zero = ImageGrid(np.zeros((2, 2)), h=0.5)
    assert tracking_cost(u, zero) == pytest.approx(0.5 * 0.25 * 30.0, abs=1e-15)
    with pytest.raises(ValueError):
        tracking_cost(u, ImageGrid(np.zeros((3, 3)), h=0.5))


def test_adjoint_vanishes_when_solution_matches_clean():
    _, noisy = make_pair(16)
    res = solve_tv(tv_problem(noisy, 300.0), tol=1e-11)
    adj = solve_adjoint(res, res.u)
    assert adj.cost == 0.0
    assert np.all(adj.p.values == 0.0)
    grads = reduced_gradient(res, adj)
    assert set(grads) == {"alpha1", "lam1"}
    assert all(g == 0.0 for g in grads.values())


def test_transposed_solve_satisfies_system(rng):
    clean, noisy = make_pair(16)
    res = solve_tv(tv_problem(noisy, 300.0), tol=1e-11)
    lin = res.linearization
    rhs = rng.normal(0.0, 1.0, lin.mat.shape[0])
    x = lin.solve_transposed(rhs)
    assert np.abs(lin.mat.T @ x - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_adjoint_matches_dense_oracle():
    clean, noisy = make_pair(16)
    res = solve_tv(tv_problem(noisy, 300.0), tol=1e-11)
    adj = solve_adjoint(res, clean)
    lin = res.linearization
    rhs = np.zeros(lin.mat.shape[0])
    rhs[lin.u_slice] = -(res.u.values - clean.values).ravel()
    dense = np.linalg.solve(lin.mat.toarray().T, rhs)
    assert np.abs(adj.full - dense).max() <= 1e-10 * max(1.0, np.abs(dense).max())


def test_gradient_matches_finite_differences():
    clean, noisy = make_pair(32)
    lam = 300.0

    def cost_at(w):
        res = solve_tv(tv_problem(noisy, w), tol=1e-11)
        return tracking_cost(res.u, clean)

    res = solve_tv(tv_problem(noisy, lam), tol=1e-11)
    grad = reduced_gradient(res, solve_adjoint(res, clean))["lam1"]
    step = 1e-4 * lam
    fd = (cost_at(lam + step) - cost_at(lam - step)) / (2.0 * step)
    assert abs(grad - fd) <= 1e-3 * max(abs(fd), 1e-12)


def test_gradient_is_descent_direction():
    clean, noisy = make_pair(32)
    lam = 150.0
    res = solve_tv(tv_problem(noisy, lam), tol=1e-11)
    c0 = tracking_cost(res.u, clean)
    g = reduced_gradient(res, solve_adjoint(res, clean))["lam1"]
    assert g != 0.0
    for t in (0.3, 0.1, 0.03, 0.01):
        trial = lam - t * lam / abs(g) * g
        if trial <= 0:
            continue
        res_t = solve_tv(tv_problem(noisy, trial), tol=1e-11)
        if tracking_cost(res_t.u, clean) < c0:
            return
    pytest.fail("no decrease along the negative gradient")


def test_spatial_gradient_sums_to_scalar_gradient():
    clean, noisy = make_pair(24)
    lam = 300.0
    scalar_res = solve_tv(tv_problem(noisy, lam), tol=1e-11)
    scalar_grad = reduced_gradient(scalar_res, solve_adjoint(scalar_res, clean))["lam1"]

    field = ImageGrid(np.full(noisy.shape, lam), h=noisy.h)
    spatial_res = solve_tv(tv_problem(noisy, field), tol=1e-11)
    grads = reduced_gradient(spatial_res, solve_adjoint(spatial_res, clean))
    spatial = grads["lam1"]
    assert spatial.shape == noisy.shape
    assert abs(spatial.sum() - scalar_grad) <= 1e-12 * max(1.0, abs(scalar_grad))


def test_loose_tolerance_warns_about_modification_gap():
    _, noisy = make_pair(32)
    prob = DenoiseProblem(
        regularizer=Regularizer(RegKind.TV, (1.0,)),
        fidelities=[(300.0, FidelityModel(FidelityKind.GAUSSIAN_L2, noisy))],
        mu=1e-12, gamma=100.0)
    res = solve_tv(prob, tol=1e-4)
    assert res.linearization.mod_gap > 1e-6
    with pytest.warns(RuntimeWarning, match="globalized Newton modification"):
        solve_adjoint(res, noisy)


def test_tight_tolerance_keeps_gradients_exact():
    _, noisy = make_pair(32)
    res = solve_tv(tv_problem(noisy, 300.0), tol=1e-11)
    assert 0.0 <= res.linearization.mod_gap <= 1e-6
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        solve_adjoint(res, noisy)
