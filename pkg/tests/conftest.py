import numpy as np
import pytest

from cbav.geometry import TemplateMesh, make_icosphere
from cbav.templates import make_humanoid


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(3)


@pytest.fixture(scope="session")
def humanoid():
    return make_humanoid()


@pytest.fixture(scope="session")
def single_triangle():
    return TemplateMesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                        np.array([[0, 1, 2]]))


def surface_samples(mesh, n, seed):
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fi = rng.choice(mesh.num_faces, n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    t = mesh.triangles()[fi]
    pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
           + (r1 * r2)[:, None] * t[:, 2])
    return pts, fi
