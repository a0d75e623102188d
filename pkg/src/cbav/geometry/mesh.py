"""Triangle meshes: the skinned template, scan meshes, and OBJ/PLY I/O.

Meshes are treated as immutable once constructed; derived quantities
(normals, areas, adjacency) are memoized on the instance.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data (bad indices, broken invariants, parse failures)."""


def _as_f8(a, shape_tail, name):
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail:
        raise MeshError(f"{name}: expected shape (*, {shape_tail}), got {arr.shape}")
    return arr


@dataclass(eq=False)
class TemplateMesh:
    """A triangle mesh, optionally rigged (joints + skinning weights).

    vertices: (M, 3) float64, meters. faces: (F, 3) int64 vertex indices.
    joints/parents/skinning_weights form the rig; parents[j] < j with -1 at
    the root. blendshapes: (K, M, 3) per-vertex offset bases.
    vertex_colors: (M, 3) RGB in [0, 1].
    """

    vertices: np.ndarray
    faces: np.ndarray
    joints: Optional[np.ndarray] = None
    parents: Optional[np.ndarray] = None
    skinning_weights: Optional[np.ndarray] = None
    blendshapes: Optional[np.ndarray] = None
    vertex_colors: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = _as_f8(self.vertices, (3,), "vertices")
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError(f"faces: expected shape (*, 3), got {self.faces.shape}")
        if self.joints is not None:
            self.joints = _as_f8(self.joints, (3,), "joints")
            self.parents = np.asarray(self.parents, dtype=np.int64)
        if self.skinning_weights is not None:
            self.skinning_weights = np.ascontiguousarray(
                np.asarray(self.skinning_weights, dtype=np.float64))
        if self.blendshapes is not None:
            self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        if self.vertex_colors is not None:
            self.vertex_colors = _as_f8(self.vertex_colors, (3,), "vertex_colors")

    # -- basic counts ------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return 0 if self.joints is None else self.joints.shape[0]

    @property
    def num_blendshapes(self) -> int:
        return 0 if self.blendshapes is None else self.blendshapes.shape[0]

    @property
    def has_rig(self) -> bool:
        return self.joints is not None and self.skinning_weights is not None

    def validate(self, weight_tol: float = 1e-6) -> None:
        """Raise MeshError on any broken structural invariant."""
        m = self.num_vertices
        if self.num_faces == 0:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= m:
            raise MeshError("face index out of range")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")
        if self.skinning_weights is not None:
            w = self.skinning_weights
            if w.shape != (m, self.num_joints):
                raise MeshError(f"skinning_weights shape {w.shape} does not match "
                                f"(M={m}, J={self.num_joints})")
            if (w < -weight_tol).any():
                raise MeshError("negative skinning weight")
            if np.abs(w.sum(axis=1) - 1.0).max() > weight_tol:
                raise MeshError("skinning weight rows must sum to 1")
        if self.parents is not None:
            p = self.parents
            if p.shape != (self.num_joints,) or p[0] != -1 or (p[1:] >= np.arange(1, len(p))).any():
                raise MeshError("parents must be topologically ordered with root -1 first")
        if self.blendshapes is not None and self.blendshapes.shape[1:] != (m, 3):
            raise MeshError("blendshape basis shape mismatch")
        if self.vertex_colors is not None:
            c = self.vertex_colors
            if c.shape != (m, 3) or c.min() < -1e-9 or c.max() > 1 + 1e-9:
                raise MeshError("vertex colors must be (M, 3) in [0, 1]")

    def copy(self) -> "TemplateMesh":
        cp = lambda a: None if a is None else a.copy()
        return TemplateMesh(self.vertices.copy(), self.faces.copy(), cp(self.joints),
                            cp(self.parents), cp(self.skinning_weights),
                            cp(self.blendshapes), cp(self.vertex_colors))

    # -- derived geometry (memoized) ---------------------------------------
    def bounds(self):
        """(min, max) corner of the axis-aligned bounding box."""
        if "bounds" not in self._cache:
            self._cache["bounds"] = (self.vertices.min(axis=0), self.vertices.max(axis=0))
        return self._cache["bounds"]

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) vertex positions per face."""
        if "triangles" not in self._cache:
            self._cache["triangles"] = self.vertices[self.faces]
        return self._cache["triangles"]

    def face_normals(self) -> np.ndarray:
        if "face_normals" not in self._cache:
            t = self.triangles()
            n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            self._cache["face_normals"] = n / np.maximum(ln, 1e-300)
        return self._cache["face_normals"]

    def face_areas(self) -> np.ndarray:
        if "face_areas" not in self._cache:
            t = self.triangles()
            n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
            self._cache["face_areas"] = 0.5 * np.linalg.norm(n, axis=1)
        return self._cache["face_areas"]

    def corner_angles(self) -> np.ndarray:
        """(F, 3) interior angle at each face corner."""
        if "corner_angles" not in self._cache:
            t = self.triangles()
            ang = np.empty((self.num_faces, 3))
            for k in range(3):
                e1 = t[:, (k + 1) % 3] - t[:, k]
                e2 = t[:, (k + 2) % 3] - t[:, k]
                c = (e1 * e2).sum(axis=1)
                s = np.linalg.norm(np.cross(e1, e2), axis=1)
                ang[:, k] = np.arctan2(s, c)
            self._cache["corner_angles"] = ang
        return self._cache["corner_angles"]

    def vertex_normals(self) -> np.ndarray:
        """Angle-weighted pseudo-normals, unit length."""
        if "vertex_normals" not in self._cache:
            fn = self.face_normals()
            ang = self.corner_angles()
            vn = np.zeros((self.num_vertices, 3))
            for k in range(3):
                np.add.at(vn, self.faces[:, k], ang[:, k, None] * fn)
            ln = np.linalg.norm(vn, axis=1, keepdims=True)
            self._cache["vertex_normals"] = vn / np.maximum(ln, 1e-300)
        return self._cache["vertex_normals"]

    def edge_face_adjacency(self) -> np.ndarray:
        """(F, 3) index of the face sharing edge slot k (edge k goes from
        corner k to corner k+1), or -1 on a boundary edge."""
        if "edge_adj" not in self._cache:
            f = self.faces
            nf = self.num_faces
            a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
            b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
            key = np.minimum(a, b) * (self.num_vertices + 1) + np.maximum(a, b)
            order = np.argsort(key, kind="stable")
            sk = key[order]
            adj = np.full(3 * nf, -1, dtype=np.int64)
            same = sk[:-1] == sk[1:]
            i = np.nonzero(same)[0]
            # pair consecutive equal keys (each manifold edge appears twice)
            keep = np.ones_like(i, dtype=bool)
            keep[1:] = i[1:] != i[:-1] + 1
            i = i[keep]
            adj[order[i]] = order[i + 1] % nf
            adj[order[i + 1]] = order[i] % nf
            self._cache["edge_adj"] = adj.reshape(3, nf).T.copy()
        return self._cache["edge_adj"]

    def is_watertight(self) -> bool:
        """True when every undirected edge is shared by exactly two faces
        with opposite orientation."""
        f = self.faces
        a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        und = np.minimum(a, b) * (self.num_vertices + 1) + np.maximum(a, b)
        _, counts = np.unique(und, return_counts=True)
        if not (counts == 2).all():
            return False
        dirkey = a * (self.num_vertices + 1) + b
        return np.unique(dirkey).size == dirkey.size


def template_hash(mesh: TemplateMesh) -> bytes:
    """32-byte digest identifying the template (geometry + rig, not colors)."""
    h = hashlib.sha256()
    h.update(struct.pack("<3q", mesh.num_vertices, mesh.num_faces, mesh.num_joints))
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    for arr in (mesh.joints, mesh.parents, mesh.skinning_weights, mesh.blendshapes):
        if arr is not None:
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# primitive builders
# ---------------------------------------------------------------------------

def make_icosphere(subdivisions: int = 3, radius: float = 1.0,
                   center=(0.0, 0.0, 0.0), rig: bool = False) -> TemplateMesh:
    """Subdivided icosahedron (12 -> 42 -> 162 -> 642 -> 2562 vertices).

    With rig=True the sphere carries a single joint at its center, useful
    for minimal skinning tests.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        verts = list(v)
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        nf = []
        for (a, b, c) in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(nf, dtype=np.int64)

    v = v * radius + np.asarray(center, dtype=np.float64)
    joints = parents = weights = None
    if rig:
        joints = np.asarray(center, dtype=np.float64).reshape(1, 3)
        parents = np.array([-1], dtype=np.int64)
        weights = np.ones((len(v), 1))
    return TemplateMesh(v, f, joints=joints, parents=parents, skinning_weights=weights)


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def save_obj(mesh: TemplateMesh, path) -> None:
    """OBJ with the common `v x y z r g b` vertex-color extension."""
    lines = []
    cols = mesh.vertex_colors
    for i, p in enumerate(mesh.vertices):
        if cols is not None:
            c = cols[i]
            lines.append(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                         f"{c[0]:.9g} {c[1]:.9g} {c[2]:.9g}")
        else:
            lines.append(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TemplateMesh:
    verts, cols, faces = [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                cols.append(vals[3:6])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"{path}: only triangle faces supported")
            faces.append(idx)
    if not verts or not faces:
        raise MeshError(f"{path}: no geometry found")
    colors = np.array(cols) if len(cols) == len(verts) else None
    return TemplateMesh(np.array(verts), np.array(faces), vertex_colors=colors)


# ---------------------------------------------------------------------------
# PLY (binary little-endian; positions double, colors uchar)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}


def save_ply(mesh: TemplateMesh, path) -> None:
    has_color = mesh.vertex_colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.num_vertices}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.num_faces}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            vdt = np.dtype([("xyz", "<f8", (3,)), ("rgb", "u1", (3,))])
            vbuf = np.empty(mesh.num_vertices, dtype=vdt)
            vbuf["xyz"] = mesh.vertices
            vbuf["rgb"] = np.clip(np.rint(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
        else:
            vdt = np.dtype([("xyz", "<f8", (3,))])
            vbuf = np.empty(mesh.num_vertices, dtype=vdt)
            vbuf["xyz"] = mesh.vertices
        fh.write(vbuf.tobytes())
        fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        fbuf = np.empty(mesh.num_faces, dtype=fdt)
        fbuf["n"] = 3
        fbuf["idx"] = mesh.faces
        fh.write(fbuf.tobytes())


def load_ply(path) -> TemplateMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]

    if "format binary_little_endian 1.0" not in header:
        raise MeshError(f"{path}: only binary little-endian PLY supported")

    elements = []  # (name, count, [(prop_name, dtype)|('list', count_dt, item_dt, name)])
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append(("list", _PLY_TYPES[parts[2]],
                                        _PLY_TYPES[parts[3]], parts[4]))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))

    verts = colors = faces = None
    off = 0
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise MeshError(f"{path}: mixed list/scalar properties unsupported")
            _, cnt_dt, item_dt, _ = props[0]
            cnt_size = np.dtype(cnt_dt).itemsize
            item_size = np.dtype(item_dt).itemsize
            n0 = int(np.frombuffer(body, dtype="<" + cnt_dt, count=1, offset=off)[0])
            if n0 != 3:
                raise MeshError(f"{path}: only triangle faces supported")
            row = np.dtype([("n", "<" + cnt_dt), ("idx", "<" + item_dt, (3,))])
            rows = np.frombuffer(body, dtype=row, count=count, offset=off)
            if not (rows["n"] == 3).all():
                raise MeshError(f"{path}: only triangle faces supported")
            if name == "face":
                faces = rows["idx"].astype(np.int64)
            off += count * (cnt_size + 3 * item_size)
        else:
            row = np.dtype([(p, "<" + dt) for p, dt in props])
            rows = np.frombuffer(body, dtype=row, count=count, offset=off)
            off += count * row.itemsize
            if name == "vertex":
                verts = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
                if "red" in row.names:
                    colors = np.stack([rows["red"], rows["green"], rows["blue"]],
                                      axis=1).astype(np.float64) / 255.0
    if verts is None or faces is None:
        raise MeshError(f"{path}: missing vertex or face element")
    return TemplateMesh(verts, faces, vertex_colors=colors)


def load_mesh(path) -> TemplateMesh:
    p = Path(path)
    if p.suffix.lower() == ".obj":
        return load_obj(p)
    if p.suffix.lower() == ".ply":
        return load_ply(p)
    raise MeshError(f"unsupported mesh format: {p.suffix}")


def save_mesh(mesh: TemplateMesh, path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".obj":
        save_obj(mesh, p)
    elif p.suffix.lower() == ".ply":
        save_ply(mesh, p)
    else:
        raise MeshError(f"unsupported mesh format: {p.suffix}")
