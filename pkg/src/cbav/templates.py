"""Bundled desk-scale templates.

The humanoid is built deterministically from a capsule skeleton: a smooth-
min union SDF is polygonized with marching cubes, skinning weights fall off
with distance to each joint's bones, and two blendshapes (belly, height)
exercise the shape path. Pelvis sits at the origin, y is up; the A-pose
keeps limbs clear of the torso.
"""

from __future__ import annotations

import numpy as np

from .geometry.mesh import TemplateMesh, make_icosphere
from .mesher import marching_cubes, sample_grid

__all__ = ["make_humanoid", "make_icosphere", "default_template"]


_JOINT_NAMES = ["pelvis", "spine", "chest", "neck", "head",
                "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
                "l_hip", "l_knee", "r_hip", "r_knee"]

_JOINTS = np.array([
    [0.00, 0.00, 0.0],    # pelvis
    [0.00, 0.12, 0.0],    # spine
    [0.00, 0.26, 0.0],    # chest
    [0.00, 0.42, 0.0],    # neck
    [0.00, 0.50, 0.0],    # head
    [0.17, 0.38, 0.0],    # l_shoulder
    [0.36, 0.22, 0.0],    # l_elbow
    [-0.17, 0.38, 0.0],   # r_shoulder
    [-0.36, 0.22, 0.0],   # r_elbow
    [0.09, -0.05, 0.0],   # l_hip
    [0.13, -0.35, 0.0],   # l_knee
    [-0.09, -0.05, 0.0],  # r_hip
    [-0.13, -0.35, 0.0],  # r_knee
])

_PARENTS = np.array([-1, 0, 1, 2, 3, 2, 5, 2, 7, 0, 9, 0, 11], dtype=np.int64)

# bones: (joint id, segment start, segment end, radius)
_BONES = [
    (0, [0.00, 0.00, 0.0], [0.00, 0.12, 0.0], 0.110),
    (0, [0.00, 0.00, 0.0], [0.09, -0.05, 0.0], 0.080),
    (0, [0.00, 0.00, 0.0], [-0.09, -0.05, 0.0], 0.080),
    (1, [0.00, 0.12, 0.0], [0.00, 0.26, 0.0], 0.115),
    (2, [0.00, 0.26, 0.0], [0.00, 0.42, 0.0], 0.105),
    (2, [0.00, 0.30, 0.0], [0.17, 0.38, 0.0], 0.055),
    (2, [0.00, 0.30, 0.0], [-0.17, 0.38, 0.0], 0.055),
    (3, [0.00, 0.42, 0.0], [0.00, 0.50, 0.0], 0.050),
    (4, [0.00, 0.50, 0.0], [0.00, 0.56, 0.0], 0.085),
    (5, [0.17, 0.38, 0.0], [0.36, 0.22, 0.0], 0.050),
    (6, [0.36, 0.22, 0.0], [0.52, 0.07, 0.0], 0.044),
    (7, [-0.17, 0.38, 0.0], [-0.36, 0.22, 0.0], 0.050),
    (8, [-0.36, 0.22, 0.0], [-0.52, 0.07, 0.0], 0.044),
    (9, [0.09, -0.05, 0.0], [0.13, -0.35, 0.0], 0.065),
    (10, [0.13, -0.35, 0.0], [0.15, -0.64, 0.0], 0.055),
    (11, [-0.09, -0.05, 0.0], [-0.13, -0.35, 0.0], 0.065),
    (12, [-0.13, -0.35, 0.0], [-0.15, -0.64, 0.0], 0.055),
]

_SMOOTH_K = 0.04


def _capsule_dist(p: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _smin(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


def _body_sdf(p: np.ndarray) -> np.ndarray:
    d = None
    for _, a, b, r in _BONES:
        dk = _capsule_dist(p, a, b) - r
        d = dk if d is None else _smin(d, dk, _SMOOTH_K)
    return d


def make_humanoid(resolution: int = 36) -> TemplateMesh:
    """Low-poly watertight humanoid with 13 joints and 2 blendshapes.

    resolution scales the polygonization density; the default lands around
    1100 vertices.
    """
    lo = np.array([-0.68, -0.78, -0.22])
    hi = np.array([0.68, 0.72, 0.22])
    extent = hi - lo
    res = np.maximum((resolution * extent / extent.max()).astype(int), 8)
    grid = sample_grid(_body_sdf, lo, hi, tuple(res))
    surf = marching_cubes(grid)

    v = surf.vertices
    dists = np.stack([_capsule_dist(v, a, b) - r for _, a, b, r in _BONES], axis=1)
    n_j = len(_JOINTS)
    joint_d = np.full((v.shape[0], n_j), np.inf)
    for bi, (ji, *_rest) in enumerate(_BONES):
        joint_d[:, ji] = np.minimum(joint_d[:, ji], np.maximum(dists[:, bi], 0.0))

    h = 0.05
    w = np.exp(-(joint_d / h) ** 2)
    # keep the two strongest influences per vertex
    order = np.argsort(-w, axis=1)
    keep = order[:, :2]
    w2 = np.zeros_like(w)
    rows = np.arange(v.shape[0])[:, None]
    w2[rows, keep] = w[rows, keep]
    # vertices far from every bone still need a valid row
    dead = w2.sum(axis=1) < 1e-300
    if dead.any():
        w2[dead, np.argmin(joint_d[dead], axis=1)] = 1.0
    weights = w2 / w2.sum(axis=1, keepdims=True)

    mesh = TemplateMesh(v, surf.faces, joints=_JOINTS.copy(), parents=_PARENTS.copy(),
                        skinning_weights=weights)
    vn = mesh.vertex_normals()

    belly_center = np.array([0.0, 0.06, 0.10])
    belly = 0.05 * np.exp(-np.sum((v - belly_center) ** 2, axis=1) / 0.18 ** 2)
    bs_belly = belly[:, None] * vn
    y = v[:, 1]
    bs_height = np.zeros_like(v)
    bs_height[:, 1] = 0.08 * (y - y.min()) / max(np.ptp(y), 1e-12)

    return TemplateMesh(v, surf.faces, joints=_JOINTS.copy(), parents=_PARENTS.copy(),
                        skinning_weights=weights,
                        blendshapes=np.stack([bs_belly, bs_height]))


def default_template(kind: str = "humanoid", **kwargs) -> TemplateMesh:
    if kind == "humanoid":
        return make_humanoid(**kwargs)
    if kind == "icosphere":
        kwargs.setdefault("rig", True)
        return make_icosphere(**kwargs)
    raise ValueError(f"unknown template kind {kind!r}")
