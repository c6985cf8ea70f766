import numpy as np
import pytest

from diffreg.phantom import reference_phantom
from diffreg.render import Camera


def random_canonical_twist(rng, rot_max=0.999 * np.pi, trans_max=25.0):
    """Twist with rotation magnitude strictly below pi (canonical branch)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0.0, rot_max)
    v = rng.uniform(-trans_max, trans_max, 3)
    return np.concatenate([omega, v])


@pytest.fixture(scope="session")
def phantom64():
    return reference_phantom()


@pytest.fixture(scope="session")
def small_camera():
    """16x16 detector covering the reference phantom; keeps tests fast."""
    return Camera(f=600.0, det_w=16, det_h=16, pixel_mm=9.0)


@pytest.fixture(scope="session")
def bench_camera():
    """The registration-grade camera used by the acceptance experiments."""
    return Camera(f=600.0, det_w=48, det_h=48, pixel_mm=3.0)
