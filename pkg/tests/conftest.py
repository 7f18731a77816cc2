import numpy as np
import pytest

from latticenet.autodiff import Tensor
from latticenet.lattice import PointCloud, build_lattice


def random_cloud(rng, d=3, m=40, features=2, extent=2.0, sigma=1.0, labels=None):
    pos = rng.uniform(-extent, extent, size=(m, d))
    feats = rng.normal(size=(m, features)) if features else None
    return PointCloud(pos, features=feats, labels=labels, sigma=sigma)


def dense_matrix(fn, n_in, n_out):
    """Materialise a linear map on column vectors by probing unit inputs."""
    M = np.zeros((n_out, n_in))
    for j in range(n_in):
        e = np.zeros((n_in, 1))
        e[j] = 1.0
        M[:, j] = fn(Tensor(e)).data[:, 0]
    return M


def small_lattice(rng, d, max_vertices=50, m=None):
    """A random cloud whose lattice has at most ``max_vertices`` vertices."""
    for _ in range(100):
        cloud = random_cloud(rng, d=d, m=m or int(rng.integers(3, 12)), extent=1.5)
        lat, asg = build_lattice(cloud)
        if len(lat) <= max_vertices:
            return cloud, lat, asg
    raise RuntimeError("could not draw a small lattice")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
