"""Linear blend skinning over a fixed kinematic tree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mesh import MeshError, TemplateMesh


@dataclass
class PoseParams:
    """Axis-angle joint rotations, shape coefficients, root translation."""

    joint_rotations: np.ndarray   # (J, 3) axis-angle, radians
    shape_coeffs: np.ndarray      # (K,)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.joint_rotations = np.atleast_2d(np.asarray(self.joint_rotations, dtype=np.float64))
        self.shape_coeffs = np.atleast_1d(np.asarray(self.shape_coeffs, dtype=np.float64))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity(num_joints: int, num_shapes: int = 0) -> "PoseParams":
        return PoseParams(np.zeros((num_joints, 3)), np.zeros(num_shapes), np.zeros(3))

    @property
    def num_joints(self) -> int:
        return self.joint_rotations.shape[0]

    @property
    def num_shapes(self) -> int:
        return self.shape_coeffs.shape[0]

    def is_identity(self) -> bool:
        return (not self.joint_rotations.any() and not self.shape_coeffs.any()
                and not self.root_translation.any())

    def to_dict(self) -> dict:
        return {"joint_rotations": self.joint_rotations.tolist(),
                "shape_coeffs": self.shape_coeffs.tolist(),
                "root_translation": self.root_translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "PoseParams":
        return PoseParams(np.asarray(d["joint_rotations"], dtype=np.float64),
                          np.asarray(d.get("shape_coeffs", []), dtype=np.float64),
                          np.asarray(d["root_translation"], dtype=np.float64))


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; accepts (..., 3), returns (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(theta > 1e-12, aa / np.maximum(theta, 1e-300), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)
    t = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(t) * K + (1.0 - np.cos(t)) * (K @ K)
    return np.where(small[..., None, None], eye, R)


def skin(mesh: TemplateMesh, pose: PoseParams) -> TemplateMesh:
    """Pose the template: blendshape offsets, then LBS, then root translation.

    Vertices attached to joint j move rigidly with the accumulated joint
    transform; blended by the row-stochastic skinning weights. Returns a new
    mesh with the same topology and the rig carried over at posed joint
    positions (blendshapes are rest-pose quantities and are dropped).
    """
    if not mesh.has_rig:
        raise MeshError("skin() needs a rigged mesh (joints + skinning weights)")
    J = mesh.num_joints
    if pose.num_joints != J:
        raise MeshError(f"pose has {pose.num_joints} joints, mesh has {J}")
    if pose.num_shapes != mesh.num_blendshapes:
        raise MeshError(f"pose has {pose.num_shapes} shape coeffs, "
                        f"mesh has {mesh.num_blendshapes} blendshapes")

    v = mesh.vertices
    if pose.num_shapes:
        v = v + np.tensordot(pose.shape_coeffs, mesh.blendshapes, axes=1)

    R_local = axis_angle_to_matrix(pose.joint_rotations)   # (J, 3, 3)
    Rw = np.empty((J, 3, 3))
    pw = np.empty((J, 3))
    for j in range(J):
        p = mesh.parents[j]
        if p < 0:
            Rw[j] = R_local[j]
            pw[j] = mesh.joints[j]
        else:
            Rw[j] = Rw[p] @ R_local[j]
            pw[j] = pw[p] + Rw[p] @ (mesh.joints[j] - mesh.joints[p])

    # per-joint rigid map of all vertices, blended by weights
    local = v[None, :, :] - mesh.joints[:, None, :]           # (J, M, 3)
    moved = np.einsum("jab,jmb->jma", Rw, local) + pw[:, None, :]
    posed = np.einsum("mj,jma->ma", mesh.skinning_weights, moved)
    posed = posed + pose.root_translation

    return TemplateMesh(posed, mesh.faces.copy(),
                        joints=pw + pose.root_translation,
                        parents=mesh.parents.copy(),
                        skinning_weights=mesh.skinning_weights.copy(),
                        blendshapes=None,
                        vertex_colors=None if mesh.vertex_colors is None
                        else mesh.vertex_colors.copy())
