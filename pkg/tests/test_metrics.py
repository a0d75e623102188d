import numpy as np

from cbav.geometry import TemplateMesh, make_icosphere
from cbav.metrics import compare_meshes, sample_surface


def test_sample_surface_on_mesh():
    mesh = make_icosphere(2)
    pts, fidx = sample_surface(mesh, 500, seed=0)
    assert pts.shape == (500, 3)
    # samples lie on the (inscribed) icosphere surface: radius close to 1
    r = np.linalg.norm(pts, axis=1)
    assert r.max() <= 1.0 + 1e-12
    assert r.min() > 0.9


def test_identical_meshes_perfect_scores():
    mesh = make_icosphere(3)
    m = compare_meshes(mesh, mesh, n=2000, seed=1)
    assert m.chamfer < 1e-9
    assert m.normal_consistency > 0.999
    assert m.f_score == 1.0


def test_concentric_spheres_chamfer_is_radius_gap():
    a = make_icosphere(3, radius=1.0)
    b = make_icosphere(3, radius=0.9)
    m = compare_meshes(a, b, n=4000, seed=2)
    # every surface point of one sphere is ~0.1 from the other, up to the
    # faceting error of subdivision-3 icospheres (~5e-3)
    assert abs(m.chamfer_a2b - 0.1) < 8e-3
    assert abs(m.chamfer_b2a - 0.1) < 8e-3
    assert m.normal_consistency > 0.99


def test_f_score_threshold_behavior():
    a = make_icosphere(3, radius=1.0)
    b = make_icosphere(3, radius=0.9)
    tight = compare_meshes(a, b, n=2000, seed=3, f_threshold=0.05)
    loose = compare_meshes(a, b, n=2000, seed=3, f_threshold=0.2)
    assert tight.f_score < 0.1
    assert loose.f_score == 1.0


def test_translated_mesh_chamfer():
    a = make_icosphere(2)
    t = np.array([0.05, 0.0, 0.0])
    b = TemplateMesh(a.vertices + t, a.faces.copy())
    m = compare_meshes(a, b, n=3000, seed=4)
    # directional chamfer of a small translation is below the shift length
    assert 0.0 < m.chamfer < 0.05
