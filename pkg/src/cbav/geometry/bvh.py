"""Closest-point queries on triangle meshes via an AABB tree.

The accelerator bundles every per-mesh quantity the local-coordinate
pipeline needs (tree, triangles, face frames, pseudo-normals) so that batch
queries are pure reads over immutable arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .mesh import MeshError, TemplateMesh

_LEAF_SIZE = 4


@dataclass
class ClosestPoint:
    """Closest point on the mesh surface to a query point.

    bary = (u, v) weights the face corners (m0, m1, m2) as
    u*m0 + v*m1 + (1-u-v)*m2.
    """

    face: int
    bary: np.ndarray      # (2,)
    point: np.ndarray     # (3,)
    distance: float


@dataclass(eq=False)
class AccelStructure:
    """Flat AABB tree plus precomputed surface frames for one mesh."""

    mesh: TemplateMesh
    node_min: np.ndarray      # (n_nodes, 3)
    node_max: np.ndarray
    node_left: np.ndarray     # (n_nodes,) child id, -1 for leaf
    node_right: np.ndarray    # (n_nodes,) child id; for leaves: start into tri_order
    node_count: np.ndarray    # (n_nodes,) 0 internal, #tris for leaf
    tri_order: np.ndarray     # (F,) permutation of face ids
    tri_verts: np.ndarray     # (F, 3, 3) in tri_order
    face_normals: np.ndarray          # (F, 3) in ORIGINAL face order
    face_frames: np.ndarray           # (F, 3, 3) rows = tangent, bitangent, normal
    vertex_normals: np.ndarray        # (M, 3) angle-weighted
    edge_normals: np.ndarray          # (F, 3, 3) pseudo-normal per edge slot

    @property
    def num_faces(self) -> int:
        return self.tri_order.shape[0]


def build_bvh(mesh: TemplateMesh) -> AccelStructure:
    """Median-split AABB tree over the mesh triangles. Deterministic."""
    nf = mesh.num_faces
    if nf < 1:
        raise MeshError("cannot build an accelerator over an empty mesh")
    areas = mesh.face_areas()
    if areas.min() <= 0.0:
        raise MeshError("zero-area face")

    tris = mesh.triangles()
    tmin = tris.min(axis=1)
    tmax = tris.max(axis=1)
    centroids = tris.mean(axis=1)

    order = np.arange(nf, dtype=np.int64)
    node_min, node_max = [], []
    node_left, node_right, node_count = [], [], []
    stack = [(0, nf, -1, False)]  # (lo, hi, parent, is_right_child)

    while stack:
        lo, hi, parent, is_right = stack.pop()
        idx = order[lo:hi]
        nid = len(node_min)
        node_min.append(tmin[idx].min(axis=0))
        node_max.append(tmax[idx].max(axis=0))
        if parent >= 0:
            if is_right:
                node_right[parent] = nid
            else:
                node_left[parent] = nid
        if hi - lo <= _LEAF_SIZE:
            node_left.append(-1)
            node_right.append(lo)
            node_count.append(hi - lo)
            continue
        node_left.append(0)
        node_right.append(0)
        node_count.append(0)
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        local = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = idx[local]
        mid = lo + (hi - lo) // 2
        stack.append((mid, hi, nid, True))
        stack.append((lo, mid, nid, False))

    mesh.validate()
    fn = mesh.face_normals()
    adj = mesh.edge_face_adjacency()
    edge_n = fn[:, None, :] + np.where(adj[..., None] >= 0, fn[adj], fn[:, None, :])
    ln = np.linalg.norm(edge_n, axis=-1, keepdims=True)
    # opposed adjacent normals (sharp folds) cancel; fall back to the face normal
    edge_n = np.where(ln > 1e-12, edge_n / np.maximum(ln, 1e-300),
                      np.broadcast_to(fn[:, None, :], edge_n.shape))

    # per-face orthonormal frame: first-edge tangent, bitangent, normal
    e0 = tris[:, 1] - tris[:, 0]
    t = e0 / np.linalg.norm(e0, axis=1, keepdims=True)
    b = np.cross(fn, t)
    frames = np.stack([t, b, fn], axis=1)

    return AccelStructure(
        mesh=mesh,
        node_min=np.array(node_min), node_max=np.array(node_max),
        node_left=np.array(node_left, dtype=np.int64),
        node_right=np.array(node_right, dtype=np.int64),
        node_count=np.array(node_count, dtype=np.int64),
        tri_order=order,
        tri_verts=np.ascontiguousarray(tris[order]),
        face_normals=fn,
        face_frames=frames,
        vertex_normals=mesh.vertex_normals(),
        edge_normals=edge_n,
    )


def accel_of(mesh: TemplateMesh) -> AccelStructure:
    """Memoized accelerator for a mesh (meshes are immutable by convention)."""
    if "accel" not in mesh._cache:
        mesh._cache["accel"] = build_bvh(mesh)
    return mesh._cache["accel"]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _closest_on_tri(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    """Closest point on triangle (a, b, c) to p; returns (d2, u, v, qx, qy, qz)
    where the point is u*a + v*b + (1-u-v)*c."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az

    d1 = abx * apx + aby * apy + abz * apz
    d2_ = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2_ <= 0.0:
        dx, dy, dz = px - ax, py - ay, pz - az
        return dx * dx + dy * dy + dz * dz, 1.0, 0.0, ax, ay, az

    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        dx, dy, dz = px - bx, py - by, pz - bz
        return dx * dx + dy * dy + dz * dz, 0.0, 1.0, bx, by, bz

    vc = d1 * d4 - d3 * d2_
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx, qy, qz = ax + t * abx, ay + t * aby, az + t * abz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, 1.0 - t, t, qx, qy, qz

    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        dx, dy, dz = px - cx, py - cy, pz - cz
        return dx * dx + dy * dy + dz * dz, 0.0, 0.0, cx, cy, cz

    vb = d5 * d2_ - d1 * d6
    if vb <= 0.0 and d2_ >= 0.0 and d6 <= 0.0:
        t = d2_ / (d2_ - d6)
        qx, qy, qz = ax + t * acx, ay + t * acy, az + t * acz
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, 1.0 - t, 0.0, qx, qy, qz

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bx + t * (cx - bx)
        qy = by + t * (cy - by)
        qz = bz + t * (cz - bz)
        dx, dy, dz = px - qx, py - qy, pz - qz
        return dx * dx + dy * dy + dz * dz, 0.0, 1.0 - t, qx, qy, qz

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = ax + abx * v + acx * w
    qy = ay + aby * v + acy * w
    qz = az + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz, 1.0 - v - w, v, qx, qy, qz


@njit(cache=True, inline="always")
def _aabb_dist2(nmin, nmax, nid, px, py, pz):
    d = 0.0
    t = nmin[nid, 0] - px
    if t > 0.0:
        d += t * t
    t = px - nmax[nid, 0]
    if t > 0.0:
        d += t * t
    t = nmin[nid, 1] - py
    if t > 0.0:
        d += t * t
    t = py - nmax[nid, 1]
    if t > 0.0:
        d += t * t
    t = nmin[nid, 2] - pz
    if t > 0.0:
        d += t * t
    t = pz - nmax[nid, 2]
    if t > 0.0:
        d += t * t
    return d


@njit(cache=True)
def _query_kernel(nmin, nmax, left, right, count, tri_order, tv, queries,
                  out_face, out_bary, out_point, out_dist):
    stack = np.empty(128, dtype=np.int64)
    for qi in range(queries.shape[0]):
        px, py, pz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        best_d2 = np.inf
        best_face = np.int64(-1)
        bu = bv = 0.0
        bqx = bqy = bqz = 0.0
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            nid = stack[top]
            if _aabb_dist2(nmin, nmax, nid, px, py, pz) > best_d2:
                continue
            if left[nid] == -1:
                start = right[nid]
                for k in range(count[nid]):
                    ti = start + k
                    d2, u, v, qx, qy, qz = _closest_on_tri(
                        tv[ti, 0, 0], tv[ti, 0, 1], tv[ti, 0, 2],
                        tv[ti, 1, 0], tv[ti, 1, 1], tv[ti, 1, 2],
                        tv[ti, 2, 0], tv[ti, 2, 1], tv[ti, 2, 2],
                        px, py, pz)
                    orig = tri_order[ti]
                    if d2 < best_d2 or (d2 == best_d2 and orig < best_face):
                        best_d2 = d2
                        best_face = orig
                        bu, bv = u, v
                        bqx, bqy, bqz = qx, qy, qz
            else:
                cl = left[nid]
                cr = right[nid]
                dl = _aabb_dist2(nmin, nmax, cl, px, py, pz)
                dr = _aabb_dist2(nmin, nmax, cr, px, py, pz)
                if dl <= dr:
                    if dr <= best_d2:
                        stack[top] = cr
                        top += 1
                    if dl <= best_d2:
                        stack[top] = cl
                        top += 1
                else:
                    if dl <= best_d2:
                        stack[top] = cl
                        top += 1
                    if dr <= best_d2:
                        stack[top] = cr
                        top += 1
        out_face[qi] = best_face
        out_bary[qi, 0] = bu
        out_bary[qi, 1] = bv
        out_point[qi, 0] = bqx
        out_point[qi, 1] = bqy
        out_point[qi, 2] = bqz
        out_dist[qi] = np.sqrt(best_d2)


def closest_points_batch(accel: AccelStructure, points: np.ndarray):
    """Vectorized closest-point query.

    Returns (faces (B,), bary (B, 2), surface points (B, 3), distances (B,)).
    Ties between equidistant faces resolve to the lowest face index.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ValueError("non-finite query coordinates")
    n = pts.shape[0]
    faces = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 2))
    cpts = np.empty((n, 3))
    dist = np.empty(n)
    _query_kernel(accel.node_min, accel.node_max, accel.node_left,
                  accel.node_right, accel.node_count, accel.tri_order,
                  accel.tri_verts, pts, faces, bary, cpts, dist)
    return faces, bary, cpts, dist


def closest_point(accel: AccelStructure, point) -> ClosestPoint:
    """Single-point query; see closest_points_batch."""
    f, b, p, d = closest_points_batch(accel, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return ClosestPoint(face=int(f[0]), bary=b[0], point=p[0], distance=float(d[0]))


# ---------------------------------------------------------------------------
# exhaustive reference (no tree) — the contract baseline for the accelerator
# ---------------------------------------------------------------------------

def closest_on_triangles(tris: np.ndarray, p: np.ndarray):
    """Vectorized closest point on each of many triangles to a single point.

    tris: (T, 3, 3). Returns (d2 (T,), bary (T, 3), points (T, 3)) with
    bary ordered (u, v, w) over corners (0, 1, 2).
    """
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    T = tris.shape[0]
    u = np.empty(T)
    v = np.empty(T)
    done = np.zeros(T, dtype=bool)

    def settle(mask, uu, vv):
        m = mask & ~done
        u[m] = uu[m] if isinstance(uu, np.ndarray) else uu
        v[m] = vv[m] if isinstance(vv, np.ndarray) else vv
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), 1.0, 0.0)                       # vertex a
    settle((d3 >= 0) & (d4 <= d3), 0.0, 1.0)                      # vertex b
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab)   # edge ab
    settle((d6 >= 0) & (d5 <= d6), 0.0, 0.0)                      # vertex c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = d2 / (d2 - d6)
        settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0)    # edge ac
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - t_bc)  # edge bc
        denom = va + vb + vc
        vi = vb / denom
        wi = vc / denom
        settle(np.ones(T, dtype=bool), 1.0 - vi - wi, vi)             # interior

    w = 1.0 - u - v
    pts = u[:, None] * a + v[:, None] * b + w[:, None] * c
    diff = p - pts
    return (diff * diff).sum(1), np.stack([u, v, w], axis=1), pts


def brute_force_closest(mesh: TemplateMesh, point) -> ClosestPoint:
    """Exhaustive scan over all faces; lowest face index wins ties."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.isfinite(p).all():
        raise ValueError("non-finite query coordinates")
    d2, bary, pts = closest_on_triangles(mesh.triangles(), p)
    face = int(np.argmin(d2))  # argmin returns the first (lowest) index on ties
    return ClosestPoint(face=face, bary=bary[face, :2].copy(),
                        point=pts[face].copy(), distance=float(np.sqrt(d2[face])))
