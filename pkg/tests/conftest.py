import numpy as np
import pytest

from varilearn.grids import ImageGrid
from varilearn.fidelity import FidelityKind, FidelityModel
from varilearn.problems import DenoiseProblem, RegKind, Regularizer


def bump_image(n, seed=None, noise=0.0, h=None):
    """Piecewise-constant disk on a flat background, optionally noisy."""
    yy, xx = np.mgrid[0:n, 0:n] / n
    vals = 0.2 + 0.6 * (((xx - 0.5 + 0.5 / n) ** 2 + (yy - 0.5 + 0.5 / n) ** 2) < 0.09)
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        vals = vals + rng.normal(0.0, noise, vals.shape)
    return ImageGrid(vals, h=1.0 / n if h is None else h)


def tv_gaussian(f, lam, mu=1e-12, gamma=100.0, alpha=1.0):
    return DenoiseProblem(
        regularizer=Regularizer(RegKind.TV, (alpha,)),
        fidelities=[(lam, FidelityModel(FidelityKind.GAUSSIAN_L2, f))],
        mu=mu, gamma=gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
