"""Isosurface extraction and mesh export for trained avatars.

Marching cubes uses a case table generated by tracing the intersection
curves over the cube faces, so every cell triangulation is consistent with
its neighbours by construction. Face-diagonal ambiguities are resolved at
runtime with the asymptotic decider (sign of the bilinear saddle value),
which both incident cells compute identically; the extracted surface is
therefore crack-free. Triangles are oriented so normals point toward
positive field values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .geometry.mesh import TemplateMesh, save_mesh


class MesherError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cube topology
# ---------------------------------------------------------------------------
# corner c -> offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
_CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)],
                           dtype=np.int64)

# edges 0-3 along x, 4-7 along y, 8-11 along z
_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7),
          (0, 2), (1, 3), (4, 6), (5, 7),
          (0, 4), (1, 5), (2, 6), (3, 7)]
_EDGE_ID = {}
for _e, (_a, _b) in enumerate(_EDGES):
    _EDGE_ID[(_a, _b)] = _e
    _EDGE_ID[(_b, _a)] = _e
_EDGE_AXIS = np.array([e // 4 for e in range(12)], dtype=np.int64)
_EDGE_BASE = np.array([_CORNER_OFFSETS[_EDGES[e][0]] for e in range(12)], dtype=np.int64)

# faces: corner cycles viewed CCW from outside the cube
_FACES = [[0, 4, 6, 2],   # x-
          [1, 3, 7, 5],   # x+
          [0, 1, 5, 4],   # y-
          [2, 6, 7, 3],   # y+
          [0, 2, 3, 1],   # z-
          [4, 5, 7, 6]]   # z+


def _ambiguous_faces(case: int):
    """Faces whose corner signs alternate around the cycle."""
    out = []
    for fi, cyc in enumerate(_FACES):
        b = [(case >> c) & 1 for c in cyc]
        if b == [1, 0, 1, 0] or b == [0, 1, 0, 1]:
            out.append(fi)
    return out


def _trace_case(case: int, joined: dict) -> list:
    """Triangles (local edge id triples) for one sign case.

    joined[face_id] = True when the inside regions connect across that
    ambiguous face. Segments are directed so that cycles wind CCW seen from
    the positive side; fans of those cycles give outward-oriented triangles.
    """
    nxt = {}
    for fi, cyc in enumerate(_FACES):
        events = []  # (edge id, is_in_to_out) in walk order
        for k in range(4):
            a, b = cyc[k], cyc[(k + 1) % 4]
            ia, ib = (case >> a) & 1, (case >> b) & 1
            if ia != ib:
                events.append((_EDGE_ID[(a, b)], ia == 1))
        if not events:
            continue
        n = len(events)
        for k, (eid, in_to_out) in enumerate(events):
            if in_to_out:
                continue
            # OUT->IN event: connect to the next IN->OUT event along the walk
            # (previous one instead when the inside regions join).
            step = -1 if (n == 4 and joined.get(fi, False)) else 1
            j = (k + step) % n
            while not events[j][1]:
                j = (j + step) % n
            nxt[eid] = events[j][0]

    tris = []
    remaining = dict(nxt)
    while remaining:
        start = min(remaining)
        cyc = [start]
        cur = remaining.pop(start)
        while cur != start:
            cyc.append(cur)
            cur = remaining.pop(cur)
        for k in range(1, len(cyc) - 1):
            tris.append((cyc[0], cyc[k], cyc[k + 1]))
    return tris


def _build_tables():
    table = {}
    amb = []
    for case in range(256):
        faces = _ambiguous_faces(case)
        amb.append(faces)
        if case in (0, 255):
            table[(case, 0)] = np.zeros((0, 3), dtype=np.int64)
            continue
        for bits in range(1 << len(faces)):
            joined = {f: bool((bits >> i) & 1) for i, f in enumerate(faces)}
            tris = _trace_case(case, joined)
            table[(case, bits)] = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return table, amb


_TABLE, _AMB_FACES = _build_tables()


# ---------------------------------------------------------------------------
# voxel grid
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VoxelGrid:
    """Scalar field sampled on a lattice over an axis-aligned box.

    resolution counts cells per axis; values has resolution + 1 samples per
    axis (one per lattice point).
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: Tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        res = tuple(int(r) for r in self.resolution)
        self.resolution = res
        if min(res) < 2:
            raise MesherError("grid resolution must be >= 2 cells per axis")
        if not (self.bbox_max > self.bbox_min).all():
            raise MesherError("degenerate bounding box")
        if self.values.shape != tuple(r + 1 for r in res):
            raise MesherError(f"values shape {self.values.shape} != lattice "
                              f"{tuple(r + 1 for r in res)}")

    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution)

    def lattice_axes(self):
        return [np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a] + 1)
                for a in range(3)]


def sample_grid(sdf: Callable[[np.ndarray], np.ndarray], bbox_min, bbox_max,
                resolution, chunk: int = 65536) -> VoxelGrid:
    """Evaluate a scalar field closure at every lattice point (deterministic,
    chunked to bound peak memory)."""
    bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
    bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
    res = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
    axes = [np.linspace(bbox_min[a], bbox_max[a], res[a] + 1) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        vals[lo:hi] = np.asarray(sdf(pts[lo:hi])).reshape(-1)
    return VoxelGrid(bbox_min, bbox_max, res,
                     vals.reshape(res[0] + 1, res[1] + 1, res[2] + 1))


# ---------------------------------------------------------------------------
# marching cubes
# ---------------------------------------------------------------------------

def _decider_bits(case: int, corner_vals: np.ndarray) -> np.ndarray:
    """Asymptotic-decider bits for every cell of one case group.

    corner_vals: (n_cells, 8) field values minus iso. Bit i is set when the
    inside regions of ambiguous face i connect across the face.
    """
    faces = _AMB_FACES[case]
    bits = np.zeros(corner_vals.shape[0], dtype=np.int64)
    for i, fi in enumerate(faces):
        cyc = _FACES[fi]
        v = corner_vals[:, cyc]                      # (n, 4) cyclic
        inside_02 = ((case >> cyc[0]) & 1) == 1      # which diagonal is inside
        if inside_02:
            a, c = v[:, 0], v[:, 2]
            b, d = v[:, 1], v[:, 3]
        else:
            a, c = v[:, 1], v[:, 3]
            b, d = v[:, 0], v[:, 2]
        denom = a + c - b - d
        with np.errstate(divide="ignore", invalid="ignore"):
            saddle = (a * c - b * d) / denom
        joined = np.where(denom != 0.0, saddle < 0.0, False)
        bits |= joined.astype(np.int64) << i
    return bits


def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TemplateMesh:
    """Extract the iso-surface as a watertight triangle mesh.

    Returns an empty mesh (0 vertices / 0 faces, with a warning) when the
    field has no sign change anywhere.
    """
    vals = np.asarray(grid.values, dtype=np.float64)
    if not np.isfinite(vals).all():
        raise MesherError("non-finite grid values")
    nx, ny, nz = grid.resolution
    inside = vals < iso

    case = np.zeros((nx, ny, nz), dtype=np.uint8)
    for c in range(8):
        dx, dy, dz = _CORNER_OFFSETS[c]
        case |= (inside[dx:nx + dx, dy:ny + dy, dz:nz + dz] << c).astype(np.uint8)

    ci, cj, ck = np.nonzero((case != 0) & (case != 255))
    if ci.size == 0:
        warnings.warn("no sign change in the grid; extracted mesh is empty")
        return TemplateMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    cell_case = case[ci, cj, ck]
    corner_vals = np.empty((ci.size, 8))
    for c in range(8):
        dx, dy, dz = _CORNER_OFFSETS[c]
        corner_vals[:, c] = vals[ci + dx, cj + dy, ck + dz]
    corner_vals -= iso

    # global edge id: ((axis * (nx+1) + i) * (ny+1) + j) * (nz+1) + k
    sx, sy, sz = nx + 1, ny + 1, nz + 1

    def edge_gids(cells_i, cells_j, cells_k, local_edges):
        ax = _EDGE_AXIS[local_edges]
        base = _EDGE_BASE[local_edges]
        gi = cells_i[:, None] + base[None, :, 0]
        gj = cells_j[:, None] + base[None, :, 1]
        gk = cells_k[:, None] + base[None, :, 2]
        return ((ax[None, :] * sx + gi) * sy + gj) * sz + gk

    tri_gids = []
    order = np.argsort(cell_case, kind="stable")
    sorted_cases = cell_case[order]
    boundaries = np.flatnonzero(np.diff(sorted_cases)) + 1
    groups = np.split(order, boundaries)
    for grp in groups:
        cval = int(cell_case[grp[0]])
        if _AMB_FACES[cval]:
            bits = _decider_bits(cval, corner_vals[grp])
        else:
            bits = np.zeros(grp.size, dtype=np.int64)
        for b in np.unique(bits):
            sel = grp[bits == b]
            tris = _TABLE[(cval, int(b))]
            if tris.size == 0:
                continue
            gids = edge_gids(ci[sel], cj[sel], ck[sel], tris.reshape(-1))
            tri_gids.append(gids.reshape(-1, 3))

    if not tri_gids:
        warnings.warn("no sign change in the grid; extracted mesh is empty")
        return TemplateMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    all_tris = np.concatenate(tri_gids, axis=0)
    uniq, faces = np.unique(all_tris, return_inverse=True)
    faces = faces.reshape(-1, 3)

    # decode edge ids -> interpolated positions
    axis = uniq // (sx * sy * sz)
    rem = uniq % (sx * sy * sz)
    gi = rem // (sy * sz)
    gj = (rem // sz) % sy
    gk = rem % sz
    p0 = np.stack([gi, gj, gk], axis=1).astype(np.float64)
    step = np.zeros((uniq.size, 3))
    step[np.arange(uniq.size), axis] = 1.0
    v0 = vals[gi, gj, gk] - iso
    oi = gi + (axis == 0)
    oj = gj + (axis == 1)
    ok = gk + (axis == 2)
    v1 = vals[oi, oj, ok] - iso
    t = v0 / (v0 - v1)
    lattice = p0 + t[:, None] * step
    spacing = grid.spacing()
    verts = grid.bbox_min + lattice * spacing

    return TemplateMesh(verts, faces.astype(np.int64))


# ---------------------------------------------------------------------------
# export and turntable
# ---------------------------------------------------------------------------

def color_and_export(mesh: TemplateMesh, color_fn: Callable[[np.ndarray], np.ndarray],
                     path, fmt: str | None = None) -> TemplateMesh:
    """Evaluate the color field at each vertex and write OBJ / binary PLY."""
    if mesh.num_faces == 0:
        raise MesherError("cannot export an empty mesh")
    colors = np.clip(np.asarray(color_fn(mesh.vertices)), 0.0, 1.0)
    out = TemplateMesh(mesh.vertices.copy(), mesh.faces.copy(), vertex_colors=colors)
    p = str(path)
    if fmt is not None and not p.lower().endswith("." + fmt.lower()):
        p = f"{p}.{fmt.lower()}"
    save_mesh(out, p)
    return out


def render_turntable(sdf_fn, color_fn, center, radius: float, n_views: int,
                     resolution: int, out_dir, bbox=None, ray_steps: int = 96,
                     fd_eps: float = 1e-3, prefix: str = "view"):
    """Render color and normal images from a camera ring; returns PNG paths."""
    from pathlib import Path

    from .adversarial import camera_ring, render_field_image, patch_to_png

    if n_views < 1:
        raise MesherError("n_views must be >= 1")
    angles = np.arange(n_views) * (360.0 / n_views)
    cams = camera_ring(center, radius=radius, angles=angles,
                       resolution=(resolution, resolution))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, cam in enumerate(cams):
        color, normal = render_field_image(sdf_fn, color_fn, cam, bbox=bbox,
                                           ray_steps=ray_steps, fd_eps=fd_eps)
        cpath = out_dir / f"{prefix}_{k:02d}_color.png"
        npath = out_dir / f"{prefix}_{k:02d}_normal.png"
        patch_to_png(color, cpath)
        patch_to_png(normal, npath)
        paths += [cpath, npath]
    return paths
