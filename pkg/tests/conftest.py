import numpy as np
import pytest

from grazing import geometry


def custom_ellipsoid(axes=(1.0, 2.0, 3.0)) -> geometry.ConvexObstacle:
    a2 = np.asarray(axes, dtype=float) ** 2

    def xi(x):
        return 1.0 - np.sum(x * x / a2, axis=-1)

    def grad(x):
        return -2.0 * x / a2

    def hess(x):
        return np.broadcast_to(np.diag(-2.0 / a2), np.shape(x)[:-1] + (3, 3)).copy()

    lv = geometry.CustomLevelSet(xi=xi, grad=grad, hess=hess)
    return geometry.custom(lv, bounding_radius=float(max(axes)), theta_omega=float(2.0 / a2.max()))


@pytest.fixture
def unit_sphere():
    return geometry.sphere()


@pytest.fixture
def ell123():
    return geometry.ellipsoid(semi_axes=(1.0, 2.0, 3.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def exterior_points(obstacle, rng, n, lo=1.05, hi=3.0):
    """Points scaled radially by a factor in [lo, hi] from random boundary points."""
    p0 = obstacle.interior_point
    y = geometry.sample_boundary(obstacle, n, rng)
    return p0 + (y - p0) * rng.uniform(lo, hi, size=(n, 1))
