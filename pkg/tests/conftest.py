import numpy as np
import pytest

from pcinv.pointcloud import PointCloud, generate_ellipse


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ellipse400():
    return generate_ellipse(400, 3.0)


def random_cloud(n, d=3, m=2, seed=0):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, d)), m)
