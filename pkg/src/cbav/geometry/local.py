"""Local triangle coordinates for field queries.

A global query point is projected to the mesh; the local conditioning tuple
is (u, v, d) plus a unit direction from the surface point toward the query.
The sign of d follows the angle-weighted pseudo-normal at the closest point
(face normal in face interiors, angle-weighted averages on edges/vertices),
which gives a correct inside/outside sign for watertight meshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bvh import AccelStructure, ClosestPoint, accel_of, closest_points_batch
from .mesh import TemplateMesh

_BARY_EPS = 1e-12     # clamped barycentric components are exact zeros
_DEGENERATE_EPS = 1e-9  # below this distance, dir falls back to the pseudo-normal


@dataclass
class LocalQuery:
    """(u, v, d) and the world-frame unit direction from x_c* toward x_g."""

    face: int
    uvd: np.ndarray   # (3,)
    dir: np.ndarray   # (3,) unit


def _pseudo_normals_batch(accel: AccelStructure, faces, bary2):
    """Pseudo-normal at each closest point, classified from the clamped
    barycentric coordinates (interior / edge / vertex)."""
    u = bary2[:, 0]
    v = bary2[:, 1]
    w = 1.0 - u - v
    zu = u < _BARY_EPS
    zv = v < _BARY_EPS
    zw = w < _BARY_EPS
    nz = zu.astype(np.int8) + zv.astype(np.int8) + zw.astype(np.int8)

    pn = accel.face_normals[faces].copy()

    edge = nz == 1
    if edge.any():
        # bary component i == 0 -> point lies on the edge opposite corner i
        slot = np.where(zu[edge], 1, np.where(zv[edge], 2, 0))
        pn[edge] = accel.edge_normals[faces[edge], slot]

    vert = nz == 2
    if vert.any():
        corner = np.where(~zu[vert], 0, np.where(~zv[vert], 1, 2))
        vid = accel.mesh.faces[faces[vert], corner]
        pn[vert] = accel.vertex_normals[vid]
    return pn


def local_coords_batch(accel: AccelStructure, points: np.ndarray):
    """Full local-coordinate pipeline for a batch of query points.

    Returns (faces, uvd (B,3), dir_world (B,3), dir_local (B,3)) where
    dir_local is dir_world expressed in the face tangent frame.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    faces, bary2, cpts, dist = closest_points_batch(accel, pts)
    pn = _pseudo_normals_batch(accel, faces, bary2)

    delta = pts - cpts
    side = (delta * pn).sum(axis=1)
    degen = dist < _DEGENERATE_EPS

    d = np.where(side >= 0.0, dist, -dist)
    d = np.where(degen, 0.0, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        dir_world = delta / dist[:, None]
    dir_world = np.where(degen[:, None], pn, dir_world)

    uvd = np.concatenate([bary2, d[:, None]], axis=1)
    frames = accel.face_frames[faces]
    dir_local = np.einsum("bij,bj->bi", frames, dir_world)
    return faces, uvd, dir_world, dir_local


def pseudo_normal(mesh: TemplateMesh, cp: ClosestPoint) -> np.ndarray:
    """Angle-weighted pseudo-normal at a closest point (unit length)."""
    accel = accel_of(mesh)
    return _pseudo_normals_batch(accel, np.array([cp.face]),
                                 cp.bary.reshape(1, 2))[0]


def local_coords(mesh: TemplateMesh, cp: ClosestPoint, x_g) -> LocalQuery:
    """LocalQuery for one closest-point result (see local_coords_batch)."""
    accel = accel_of(mesh)
    x = np.asarray(x_g, dtype=np.float64).reshape(3)
    pn = _pseudo_normals_batch(accel, np.array([cp.face]), cp.bary.reshape(1, 2))[0]
    delta = x - cp.point
    dist = float(np.linalg.norm(delta))
    if dist < _DEGENERATE_EPS:
        d = 0.0
        direction = pn
    else:
        d = dist if float(delta @ pn) >= 0.0 else -dist
        direction = delta / dist
    return LocalQuery(face=cp.face,
                      uvd=np.array([cp.bary[0], cp.bary[1], d]),
                      dir=direction)


def face_frame(mesh: TemplateMesh, face: int) -> np.ndarray:
    """(3, 3) orthonormal face frame; rows = (tangent, bitangent, normal)."""
    return accel_of(mesh).face_frames[face]


def to_face_frame(mesh: TemplateMesh, face: int, vec: np.ndarray) -> np.ndarray:
    """Express a world vector in the face tangent frame."""
    return face_frame(mesh, face) @ np.asarray(vec, dtype=np.float64)


def from_face_frame(mesh: TemplateMesh, face: int, vec: np.ndarray) -> np.ndarray:
    """Express a face-frame vector in world coordinates."""
    return face_frame(mesh, face).T @ np.asarray(vec, dtype=np.float64)
