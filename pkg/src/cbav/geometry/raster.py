"""Perspective z-buffer rasterizer (reference implementation, numpy).

Produces color/normal/depth images plus the per-pixel world positions and
face ids needed to lift 2D paint edits back onto the surface. Attributes
are interpolated perspective-correctly; normals are the angle-weighted
vertex normals, renormalized per pixel and remapped to [0, 1]^3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .mesh import TemplateMesh

BACKGROUND = 0.5          # background constant for color and normal images
_ZNEAR = 1e-6


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float                 # radians
    resolution: Tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if not (0.0 < self.fov_y < np.pi):
            raise CameraError(f"fov_y must be in (0, pi), got {self.fov_y}")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise CameraError("resolution must be positive")
        if np.linalg.norm(self.look_at - self.position) < 1e-12:
            raise CameraError("camera position coincides with look_at")

    def basis(self):
        """(right, true_up, forward) orthonormal world-frame basis."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise CameraError("up vector is parallel to the view direction")
        right /= nr
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(),
                "up": self.up.tolist(), "fov_y": self.fov_y,
                "resolution": list(self.resolution)}

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(np.asarray(d["position"]), np.asarray(d["look_at"]),
                      np.asarray(d["up"]), float(d["fov_y"]),
                      (int(d["resolution"][0]), int(d["resolution"][1])))

    def pixel_rays(self, xs: np.ndarray, ys: np.ndarray):
        """World-space unit ray directions through pixel centers (px, py)."""
        w, h = self.resolution
        right, true_up, fwd = self.basis()
        tan = np.tan(self.fov_y / 2.0)
        aspect = w / h
        x_ndc = ((xs + 0.5) * 2.0 / w - 1.0) * tan * aspect
        y_ndc = (1.0 - (ys + 0.5) * 2.0 / h) * tan
        d = (fwd[None, :] + x_ndc[:, None] * right[None, :]
             + y_ndc[:, None] * true_up[None, :])
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class RasterResult:
    color: np.ndarray      # (H, W, 3) in [0, 1]
    normal: np.ndarray     # (H, W, 3) unit normals remapped to [0, 1]
    depth: np.ndarray      # (H, W) view depth, +inf background
    mask: np.ndarray       # (H, W) bool, True where covered
    position: np.ndarray   # (H, W, 3) world position of the surface point
    face: np.ndarray       # (H, W) face id, -1 background


def rasterize(mesh: TemplateMesh, camera: Camera) -> RasterResult:
    w, h = camera.resolution
    right, true_up, fwd = camera.basis()
    tan = np.tan(camera.fov_y / 2.0)
    aspect = w / h

    rel = mesh.vertices - camera.position
    zv = rel @ fwd
    xc = rel @ right
    yc = rel @ true_up
    with np.errstate(divide="ignore", invalid="ignore"):
        px = ((xc / (zv * tan * aspect)) + 1.0) * 0.5 * w - 0.5
        py = (1.0 - (yc / (zv * tan))) * 0.5 * h - 0.5

    colors = mesh.vertex_colors
    if colors is None:
        colors = np.full((mesh.num_vertices, 3), 0.75)
    vnorm = mesh.vertex_normals()

    color = np.full((h, w, 3), BACKGROUND)
    normal = np.full((h, w, 3), BACKGROUND)
    depth = np.full((h, w), np.inf)
    position = np.zeros((h, w, 3))
    face_id = np.full((h, w), -1, dtype=np.int64)

    for fi in range(mesh.num_faces):
        i0, i1, i2 = mesh.faces[fi]
        z0, z1, z2 = zv[i0], zv[i1], zv[i2]
        if z0 <= _ZNEAR or z1 <= _ZNEAR or z2 <= _ZNEAR:
            continue  # no near-plane clipping; cameras sit outside the mesh
        x0, x1, x2 = px[i0], px[i1], px[i2]
        y0, y1, y2 = py[i0], py[i1], py[i2]
        lo_x = max(int(np.ceil(min(x0, x1, x2))), 0)
        hi_x = min(int(np.floor(max(x0, x1, x2))), w - 1)
        lo_y = max(int(np.ceil(min(y0, y1, y2))), 0)
        hi_y = min(int(np.floor(max(y0, y1, y2))), h - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue

        gx, gy = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
        b0 = ((x1 - gx) * (y2 - gy) - (x2 - gx) * (y1 - gy)) / area
        b1 = ((x2 - gx) * (y0 - gy) - (x0 - gx) * (y2 - gy)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= -1e-12) & (b1 >= -1e-12) & (b2 >= -1e-12)
        if not inside.any():
            continue

        inv_z = b0 / z0 + b1 / z1 + b2 / z2
        z_pix = 1.0 / inv_z
        rows = gy[inside]
        cols = gx[inside]
        zp = z_pix[inside]
        closer = zp < depth[rows, cols]
        if not closer.any():
            continue
        rows, cols, zp = rows[closer], cols[closer], zp[closer]
        w0 = (b0[inside][closer] / z0) * zp
        w1 = (b1[inside][closer] / z1) * zp
        w2 = (b2[inside][closer] / z2) * zp

        depth[rows, cols] = zp
        face_id[rows, cols] = fi
        color[rows, cols] = (w0[:, None] * colors[i0] + w1[:, None] * colors[i1]
                             + w2[:, None] * colors[i2])
        n = (w0[:, None] * vnorm[i0] + w1[:, None] * vnorm[i1]
             + w2[:, None] * vnorm[i2])
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        normal[rows, cols] = (n + 1.0) * 0.5
        position[rows, cols] = (w0[:, None] * mesh.vertices[i0]
                                + w1[:, None] * mesh.vertices[i1]
                                + w2[:, None] * mesh.vertices[i2])

    mask = np.isfinite(depth)
    color = np.clip(color, 0.0, 1.0)
    return RasterResult(color=color, normal=normal, depth=depth, mask=mask,
                        position=position, face=face_id)
