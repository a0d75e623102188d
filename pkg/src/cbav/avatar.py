"""Avatar customization: initialization, codebook inversion against frozen
decoders, cross-subject feature transfer, 2D texture painting, reposing.

An avatar is a codebook plus a pose over a shared template; the decoders
stay outside it (they are checkpoint state). Field closures blend the
neural distance toward the template distance far outside the trained shell,
which keeps extraction and ray marching stable in regions the thin-shell
supervision never visited (the near field is purely neural).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Tuple

import numpy as np

from .codebook import (Codebook, PcaModel, codebook_from_rows, pca_sample,
                       subject_codebook)
from .field import DecoderWeights, query_field_batch
from .geometry.bvh import accel_of
from .geometry.mesh import TemplateMesh
from .geometry.raster import Camera, rasterize
from .geometry.skinning import PoseParams, skin
from .training import (AdamState, Scan, TrainConfig, adam_step, loss_3d,
                       sample_points, scheduled_lr)

BLEND_START = 0.05   # |d| (fraction of bbox diagonal) where neural -> template blending begins
BLEND_END = 0.09     # pure template distance beyond this; < the extraction bbox margin


class AvatarError(ValueError):
    pass


@dataclass
class Avatar:
    codebook: Codebook
    pose: PoseParams
    template: TemplateMesh
    provenance: str = ""

    def __post_init__(self):
        if self.codebook.num_vertices != self.template.num_vertices:
            raise AvatarError("codebook rows do not match the template vertex count")

    def posed_mesh(self) -> TemplateMesh:
        key = ("posed", id(self.pose))
        if key not in self.template._cache:
            if self.pose.is_identity():
                self.template._cache[key] = self.template
            else:
                self.template._cache[key] = skin(self.template, self.pose)
        return self.template._cache[key]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def field_closures(avatar: Avatar, phi: DecoderWeights, psi: DecoderWeights,
                   blend: bool = True):
    """(sdf_fn, color_fn) over global points for the posed avatar.

    With blend=True the distance output interpolates toward the raw local d
    over |d| in [BLEND_START, BLEND_END] x bbox diagonal; surface-adjacent
    queries are unaffected.
    """
    posed = avatar.posed_mesh()
    accel = accel_of(posed)
    diag = posed.bbox_diagonal()
    t0 = BLEND_START * diag
    t1 = BLEND_END * diag

    def sdf_fn(pts):
        s, _, tape = query_field_batch(accel, avatar.codebook, phi, None, pts)
        if not blend:
            return s
        d = tape.uvd[:, 2]
        w = _smoothstep((np.abs(d) - t0) / (t1 - t0))
        return (1.0 - w) * s + w * d

    def color_fn(pts):
        _, c, _ = query_field_batch(accel, avatar.codebook, None, psi, pts)
        return c

    return sdf_fn, color_fn


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_avatar_from_index(dict_s, dict_c, index: int, template: TemplateMesh,
                           pose: Optional[PoseParams] = None) -> Avatar:
    """Avatar from one training subject's dictionary rows (both kinds)."""
    m = template.num_vertices
    f = dict_s.row_length // m
    cb = subject_codebook(dict_s, dict_c, index, m, f)
    pose = pose if pose is not None else PoseParams.identity(template.num_joints,
                                                             template.num_blendshapes)
    return Avatar(cb, pose, template, provenance=f"dictionary:{index}")


def init_avatar_from_sample(pca_s: PcaModel, pca_c: PcaModel, seed: int,
                            template: TemplateMesh,
                            pose: Optional[PoseParams] = None) -> Avatar:
    """Avatar from independent geometry/texture PCA samples."""
    m = template.num_vertices
    f = pca_s.mean.shape[0] // m
    rng = np.random.default_rng(seed)
    row_s = pca_sample(pca_s, rng)
    row_c = pca_sample(pca_c, rng)
    cb = codebook_from_rows(row_s, row_c, m, f)
    pose = pose if pose is not None else PoseParams.identity(template.num_joints,
                                                             template.num_blendshapes)
    return Avatar(cb, pose, template, provenance=f"sample:{seed}")


def mean_codebook(dict_s, dict_c, mesh_m: int, f: int) -> Codebook:
    return codebook_from_rows(dict_s.entries.mean(axis=0),
                              dict_c.entries.mean(axis=0), mesh_m, f)


# ---------------------------------------------------------------------------
# model fitting (codebook inversion)
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    avatar: Avatar
    trace: list


def fit_codebook(scan: Scan, dict_s, dict_c, phi: DecoderWeights,
                 psi: DecoderWeights, template: TemplateMesh, cfg: TrainConfig,
                 geom_iters: int = 100, tex_iters: int = 300) -> FitResult:
    """Invert a scan into a codebook with the decoders frozen.

    Starts from the dictionary mean; Adam on the codebook only against the
    distance + color losses with fresh thin-shell samples per iteration. The
    first phase fits both kinds; the remaining iterations refine texture via
    the color loss alone (geometry columns receive no gradient there).
    """
    m = template.num_vertices
    f = phi.feature_dim
    cb = mean_codebook(dict_s, dict_c, m, f)
    avatar = Avatar(cb, scan.pose, template, provenance="fitted")
    posed = avatar.posed_mesh()
    accel = accel_of(posed)
    rng = np.random.default_rng(cfg.seed + 7919)
    adam = AdamState.for_params([cb.features])
    phi_v, psi_v = phi.version, psi.version

    from .field import fd_offsets, gradient_from_offsets, backward_query

    trace = []
    n = max(cfg.points_per_iter // max(cfg.batch_subjects, 1), 256)
    for it in range(geom_iters + tex_iters):
        tex_only = it >= geom_iters
        batch = sample_points(scan, n, rng, cfg.shell_sigmas)
        if tex_only:
            _, c, tape = query_field_batch(accel, cb, None, psi, batch.x_g)
            err = c - batch.c_gt
            l_rgb = np.abs(err).sum(axis=1).mean()
            d_c = cfg.lambda_rgb * np.sign(err) / n
            _, _, cb_grad = backward_query(tape, None, d_c)
            row = {"iteration": it + 1, "l_sdf": float("nan"),
                   "l_rgb": float(l_rgb)}
        else:
            s, c, tape = query_field_batch(accel, cb, phi, psi, batch.x_g)
            offs = fd_offsets(batch.x_g, cfg.fd_eps).reshape(-1, 3)
            s_off, _, tape_off = query_field_batch(accel, cb, phi, None, offs)
            grad_s = gradient_from_offsets(s_off.reshape(n, 6), cfg.fd_eps)
            res = loss_3d(s, c, grad_s, batch.s_gt, batch.c_gt, batch.n_gt, cfg)
            _, _, cb_grad = backward_query(tape, res.d_s, res.d_c)
            seed6 = np.empty((n, 6))
            for k in range(3):
                g = res.d_grad_s[:, k] / (2.0 * cfg.fd_eps)
                seed6[:, 2 * k] = g
                seed6[:, 2 * k + 1] = -g
            _, _, cb_grad2 = backward_query(tape_off, seed6.reshape(-1), None)
            cb_grad = cb_grad + cb_grad2
            row = {"iteration": it + 1, "l_sdf": res.l_sdf, "l_rgb": res.l_rgb}
        lr_t = scheduled_lr(cfg, it + 1, geom_iters + tex_iters) * cfg.dict_lr_scale
        new_p, adam = adam_step([cb.features], [cb_grad], adam,
                                lr_t, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        cb.features = new_p[0]
        trace.append(row)

    if phi.version != phi_v or psi.version != psi_v:
        raise AvatarError("decoder weights changed during fitting")
    return FitResult(avatar=avatar, trace=trace)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def transfer_region(dst: Avatar, src: Avatar, vertex_set, kinds) -> Avatar:
    """Swap the selected rows from src into dst (pose of dst unchanged)."""
    if dst.template is not src.template and \
            dst.template.num_vertices != src.template.num_vertices:
        raise AvatarError("avatars do not share a template")
    from .codebook import swap_rows
    cb = swap_rows(dst.codebook, src.codebook, vertex_set, kinds)
    return replace(dst, codebook=cb, provenance="edited")


@dataclass
class PaintInput:
    """A rasterized view with painted pixels to pull onto the texture."""

    image: np.ndarray       # (H, W, 3) edited colors in [0, 1]
    mask: np.ndarray        # (H, W) bool, painted pixels
    camera: Camera
    target_mesh: TemplateMesh  # the mesh the image was rasterized from


def paint_texture(avatar: Avatar, paint: PaintInput, psi: DecoderWeights,
                  cfg: TrainConfig, iters: int = 300) -> Avatar:
    """Finetune only the texture columns so rendered colors match the paint.

    Painted pixels are lifted to 3D surface points through the rasterization
    depth of the target mesh; geometry columns are untouched bitwise.
    """
    img = rasterize(paint.target_mesh, paint.camera)
    sel = paint.mask & img.mask
    if not sel.any():
        raise AvatarError("empty paint mask (no painted foreground pixels)")
    pts = img.position[sel]
    cols = paint.image[sel]

    posed = avatar.posed_mesh()
    accel = accel_of(posed)
    cb = avatar.codebook.copy()
    adam = AdamState.for_params([cb.features])
    psi_v = psi.version
    from .field import backward_query

    n = pts.shape[0]
    for it in range(iters):
        _, c, tape = query_field_batch(accel, cb, None, psi, pts)
        err = c - cols
        d_c = cfg.lambda_rgb * np.sign(err) / n
        _, _, cb_grad = backward_query(tape, None, d_c)
        lr_t = scheduled_lr(cfg, it + 1, iters) * cfg.dict_lr_scale
        new_p, adam = adam_step([cb.features], [cb_grad], adam,
                                lr_t, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        cb.features = new_p[0]

    if psi.version != psi_v:
        raise AvatarError("decoder weights changed during painting")
    return replace(avatar, codebook=cb, provenance="edited")


def repose(avatar: Avatar, new_pose: PoseParams) -> Avatar:
    """Replace the pose; codebook bytes untouched."""
    if new_pose.num_joints != avatar.template.num_joints:
        raise AvatarError("pose joint count does not match the template")
    if new_pose.num_shapes != avatar.template.num_blendshapes:
        raise AvatarError("pose shape count does not match the template")
    return replace(avatar, pose=new_pose)


def vertices_for_joints(template: TemplateMesh, joint_ids: Iterable[int],
                        threshold: float = 0.5) -> np.ndarray:
    """Vertex indices whose summed skinning weight over the given joints
    exceeds the threshold (a practical region selector for editing)."""
    if not template.has_rig:
        raise AvatarError("template has no rig")
    ids = list(joint_ids)
    w = template.skinning_weights[:, ids].sum(axis=1)
    return np.nonzero(w > threshold)[0]


# ---------------------------------------------------------------------------
# extraction helpers
# ---------------------------------------------------------------------------

def extraction_bbox(avatar: Avatar, margin: float = 0.10) -> Tuple[np.ndarray, np.ndarray]:
    """Posed template bounds inflated by a fraction of their diagonal."""
    posed = avatar.posed_mesh()
    lo, hi = posed.bounds()
    pad = margin * float(np.linalg.norm(hi - lo))
    return lo - pad, hi + pad


def extract_mesh(avatar: Avatar, phi: DecoderWeights, psi: DecoderWeights,
                 resolution: int = 64):
    """Marching cubes over the blended field; vertices colored via the color
    decoder. Returns the colored mesh."""
    from .mesher import marching_cubes, sample_grid

    sdf_fn, color_fn = field_closures(avatar, phi, psi)
    lo, hi = extraction_bbox(avatar)
    grid = sample_grid(sdf_fn, lo, hi, resolution)
    mesh = marching_cubes(grid)
    if mesh.num_faces == 0:
        return mesh
    colors = np.clip(color_fn(mesh.vertices), 0.0, 1.0)
    return TemplateMesh(mesh.vertices, mesh.faces, vertex_colors=colors)
