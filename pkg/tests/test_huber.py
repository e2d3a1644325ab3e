import numpy as np
import pytest

from varilearn import huber


def test_value_hand_cases():
    assert huber.huber_value((2.0, 0.0), 1.0) == pytest.approx(1.5, abs=1e-15)
    assert huber.huber_value((0.3, 0.4), 1.0) == pytest.approx(0.125, abs=1e-15)
    assert huber.huber_value((3.0, 4.0), np.inf) == pytest.approx(5.0, abs=1e-15)


def test_value_and_slope_continuous_at_kink():
    for gamma in (1.0, 10.0, 100.0):
        r = 1.0 / gamma
        quad = 0.5 * gamma * r ** 2
        lin = r - 0.5 / gamma
        assert abs(quad - lin) <= 1e-12
        # radial slope: gamma*r from the quadratic side, 1 from the linear side
        assert abs(gamma * r - 1.0) <= 1e-12


def test_hgamma_max_hand_cases():
    assert np.allclose(huber.h_gamma_max((3.0, 4.0), 10.0), (0.6, 0.8), atol=1e-15)
    assert np.allclose(huber.h_gamma_max((0.01, 0.0), 10.0), (0.1, 0.0), atol=1e-15)


def test_hgamma_max_norm_bound(rng):
    z = rng.standard_normal((2, 100, 100)) * 10.0 ** rng.uniform(-3, 3, (2, 100, 100))
    out = huber.hgamma(z, 50.0)
    norms = np.sqrt(np.sum(out * out, axis=0))
    assert np.all(norms <= 1.0 + 1e-14)


def test_hgamma_smooth_branches():
    assert np.allclose(huber.h_gamma_smooth((0.05, 0.0), 2.0), (0.1, 0.0), atol=1e-15)
    assert np.allclose(huber.h_gamma_smooth((2.0, 0.0), 2.0), (1.0, 0.0), atol=1e-15)


def test_hgamma_smooth_continuous_at_thresholds():
    for gamma in (2.0, 10.0, 100.0):
        for r in ((1.0 - 0.5 / gamma) / gamma, (1.0 + 0.5 / gamma) / gamma):
            eps = 1e-9 * r
            lo = huber.h_gamma_smooth((r - eps, 0.0), gamma)[0]
            hi = huber.h_gamma_smooth((r + eps, 0.0), gamma)[0]
            assert abs(hi - lo) <= 1e-7


def test_newton_block_inactive_is_gamma_identity():
    block, degenerate = huber.h_gamma_newton_block((0.01, 0.0), (0.0, 0.0), 1.0, 10.0)
    assert not degenerate
    assert np.allclose(block, 10.0 * np.eye(2), atol=1e-15)


def test_newton_block_zero_z_degenerate():
    block, degenerate = huber.h_gamma_newton_block((0.0, 0.0), (0.2, 0.0), 1.0, 25.0)
    assert degenerate
    assert np.allclose(block, 25.0 * np.eye(2), atol=1e-15)


def test_newton_block_unmodified_symmetric(rng):
    for _ in range(50):
        z = tuple(rng.standard_normal(2) * 10.0 ** rng.uniform(-2, 1))
        block, _ = huber.h_gamma_newton_block(z, (0.0, 0.0), 1.0, 100.0, modified=False)
        assert np.allclose(block, block.T, atol=1e-14)


def test_newton_block_is_derivative_of_hgamma_max(rng):
    gamma = 10.0
    hits = 0
    for _ in range(40):
        z = rng.standard_normal(2)
        if abs(np.linalg.norm(z) - 1.0 / gamma) < 1e-2:
            continue  # stay away from the kink
        block, _ = huber.h_gamma_newton_block(tuple(z), (0.0, 0.0), 1.0, gamma,
                                              modified=False)
        d = rng.standard_normal(2)
        eps = 1e-7
        fd = (np.asarray(huber.h_gamma_max(tuple(z + eps * d), gamma))
              - np.asarray(huber.h_gamma_max(tuple(z - eps * d), gamma))) / (2 * eps)
        assert np.linalg.norm(block @ d - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))
        hits += 1
    assert hits >= 30


def test_value_convex_midpoint(rng):
    for gamma in (1.0, 100.0, np.inf):
        for _ in range(100):
            a, b = rng.standard_normal(2), rng.standard_normal(2)
            mid = huber.huber_value(tuple(0.5 * (a + b)), gamma)
            avg = 0.5 * (huber.huber_value(tuple(a), gamma)
                         + huber.huber_value(tuple(b), gamma))
            assert mid <= avg + 1e-12


def test_hgamma_is_gradient_of_value(rng):
    gamma = 10.0
    for _ in range(30):
        g = rng.standard_normal(2)
        if abs(np.linalg.norm(g) - 1.0 / gamma) < 1e-2:
            continue
        d = rng.standard_normal(2)
        eps = 1e-7
        fd = (huber.huber_value(tuple(g + eps * d), gamma)
              - huber.huber_value(tuple(g - eps * d), gamma)) / (2 * eps)
        an = float(np.dot(huber.h_gamma_max(tuple(g), gamma), d))
        assert abs(an - fd) <= 1e-6 * max(1.0, abs(fd))


def test_value_increases_to_norm_with_gamma(rng):
    for _ in range(20):
        g = tuple(rng.standard_normal(2))
        vals = [huber.huber_value(g, gam) for gam in (1.0, 10.0, 100.0, 1000.0)]
        norm = float(np.hypot(*g))
        assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))
        assert all(v <= norm + 1e-15 for v in vals)


def test_array_kernels_match_pointwise_forms(rng):
    z = rng.standard_normal((2, 9, 9))
    gamma = 30.0
    arr = huber.hgamma(z, gamma)
    sm = huber.hgamma_smooth(z, gamma)
    for i in range(9):
        for j in range(9):
            assert np.allclose(arr[:, i, j],
                               huber.h_gamma_max(tuple(z[:, i, j]), gamma), atol=1e-14)
            assert np.allclose(sm[:, i, j],
                               huber.h_gamma_smooth(tuple(z[:, i, j]), gamma), atol=1e-14)
