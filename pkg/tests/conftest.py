import numpy as np
import pytest

from hypformer import autodiff as ad
from hypformer.geometry import lift_euclidean


def random_points(rng, n, d, k=-1.0, scale=0.8):
    """On-manifold rows lifted from Gaussian features of moderate norm."""
    with ad.no_grad():
        return lift_euclidean(scale * rng.standard_normal((n, d)), k)


def ball_points(rng, n, d, k=-1.0, radius=2.5):
    """Rows spread over the geodesic ball of the given radius around the origin.

    Lorentz coordinates grow like exp(radius), and so does their rounding
    error, so precision tests stay within a bounded radius.
    """
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(0, 1, (n, 1)) ** (1.0 / d)
    with ad.no_grad():
        return lift_euclidean(v * r / np.sqrt(-k), k)


def max_residual(batch):
    return float(np.max(batch.residual()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()
