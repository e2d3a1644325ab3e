"""Quality measures: hand values, sentinels, and metric identities."""
import math

import numpy as np
import pytest

from conftest import bump_image

from varilearn.grids import ImageGrid
from varilearn.metrics import interior_condition, psnr, snr, ssim, tv_seminorm


def test_snr_hand_value():
    f0 = ImageGrid(np.array([[1.0, 2.0], [2.0, 4.0]]), h=1.0)
    u = ImageGrid(f0.values + 0.25, h=1.0)
    assert snr(u, f0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_hand_value():
    f0 = ImageGrid(np.zeros((4, 4)), h=1.0)
    u = ImageGrid(np.full((4, 4), 0.1), h=1.0)
    assert psnr(u, f0) == pytest.approx(20.0, abs=1e-12)


def test_identical_images_hit_sentinels():
    f0 = bump_image(16)
    assert snr(f0, f0) == math.inf
    assert psnr(f0, f0) == math.inf
    assert ssim(f0, f0) == 1.0


def test_shape_mismatch_raises():
    a, b = bump_image(16), bump_image(24)
    for metric in (snr, psnr, ssim):
        with pytest.raises(ValueError):
            metric(a, b)
    with pytest.raises(ValueError):
        interior_condition(a, b)


def test_ssim_is_symmetric_and_bounded(rng):
    a = bump_image(32)
    b = ImageGrid(a.values + rng.normal(0.0, 0.1, a.shape), h=a.h)
    s_ab, s_ba = ssim(a, b), ssim(b, a)
    assert abs(s_ab - s_ba) <= 1e-12
    assert s_ab < 1.0


def test_tv_seminorm_step_hand_value():
    n = 8
    vals = np.zeros((n, n))
    vals[:, 4:] = 0.5
    u = ImageGrid(vals, h=1.0 / n)
    # one column of jumps: h^2 * n * (0.5 / h) = 0.5
    assert tv_seminorm(u) == pytest.approx(0.5, abs=1e-12)


def test_tv_seminorm_positive_homogeneity(rng):
    u = ImageGrid(rng.normal(0.0, 1.0, (16, 16)), h=1.0 / 16)
    scaled = ImageGrid(-2.3 * u.values, h=u.h)
    assert tv_seminorm(scaled) == pytest.approx(2.3 * tv_seminorm(u), rel=1e-12)


def test_huberised_tv_below_exact_and_converging(rng):
    u = ImageGrid(rng.normal(0.0, 1.0, (16, 16)), h=1.0 / 16)
    exact = tv_seminorm(u)
    assert tv_seminorm(u, gamma=100.0) <= exact
    assert tv_seminorm(u, gamma=1e8) == pytest.approx(exact, rel=1e-6)


def test_psnr_decreases_with_noise_level():
    clean = bump_image(32)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        unit = rng.normal(0.0, 1.0, clean.shape)
        values = [psnr(ImageGrid(clean.values + s * unit, h=clean.h), clean)
                  for s in (0.02, 0.05, 0.1, 0.2, 0.3)]
        assert all(b < a for a, b in zip(values, values[1:]))


def test_interior_condition_flags_noise():
    clean = bump_image(32)
    rng = np.random.default_rng(0)
    noisy = ImageGrid(clean.values + rng.normal(0.0, math.sqrt(0.02), clean.shape),
                      h=clean.h)
    assert interior_condition(noisy, clean)
    assert not interior_condition(clean, clean)
