"""Implicit patch rendering, ground-truth patch rasterization, the patch
discriminators, and the GAN losses.

Fake patches ray-march the field of a PCA-sampled codebook (first sign
change + secant refinement); real patches crop rasterized scans around the
projected template joints. Two small leaky-rectifier discriminators (one
for color, one for normal patches) train with the non-saturating logistic
loss plus R1; the generator term backpropagates through the rendered pixels
into the decoders and, through the sampling mean, the whole dictionaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codebook import Codebook, codebook_from_rows, pca_fit, pca_sample_coeffs
from .field import (DecoderWeights, backward, backward_query, fd_offsets,
                    gradient_from_offsets, query_field_batch)
from .geometry.bvh import AccelStructure, accel_of
from .geometry.mesh import TemplateMesh
from .geometry.raster import BACKGROUND, Camera, rasterize

_LEAKY = 0.2
_DISC_HIDDEN = (256, 128)


class RenderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

def camera_ring(center, radius: float = 2.0, angles: Sequence[float] = (0, 90, 180, 270),
                resolution: Tuple[int, int] = (256, 256), fov_y: float = 0.9) -> List[Camera]:
    """Cameras on a horizontal circle (y up), all aimed at the center;
    angle 0 sits at center + (radius, 0, 0)."""
    if radius <= 0:
        raise RenderError("camera ring radius must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    cams = []
    for a in angles:
        t = np.deg2rad(float(a))
        pos = center + radius * np.array([np.cos(t), 0.0, np.sin(t)])
        cams.append(Camera(pos, center, np.array([0.0, 1.0, 0.0]), fov_y, resolution))
    return cams


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_range: Tuple[float, float]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dir = np.asarray(self.dir, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.dir) - 1.0) > 1e-9:
            raise RenderError("ray direction must be unit length")
        if not self.t_range[0] < self.t_range[1]:
            raise RenderError("ray t_range must satisfy near < far")


def intersect_ray(field, ray: Ray, steps: int):
    """March uniform samples; secant-refine the first sign change.

    Returns (t_hit, x_hit) or None. A ray starting inside (negative field at
    near) returns the near sample.
    """
    if steps < 2:
        raise RenderError("need at least 2 samples along the ray")
    ts = np.linspace(ray.t_range[0], ray.t_range[1], steps)
    pts = ray.origin[None, :] + ts[:, None] * ray.dir[None, :]
    vals = np.asarray(field(pts)).reshape(-1)
    if vals[0] < 0.0:
        return ts[0], pts[0]
    for i in range(steps - 1):
        s0, s1 = vals[i], vals[i + 1]
        if s0 > 0.0 and s1 <= 0.0:
            t = ts[i] - s0 * (ts[i + 1] - ts[i]) / (s1 - s0)
            return t, ray.origin + t * ray.dir
    return None


def _ray_box_range(origins, dirs, box_min, box_max):
    """Slab intersection; returns (t0, t1, hit mask) with t0 >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (box_min[None, :] - origins) * inv
    t_hi = (box_max[None, :] - origins) * inv
    t1f = np.minimum(t_lo, t_hi)
    t2f = np.maximum(t_lo, t_hi)
    # parallel rays: ignore that axis unless origin is outside the slab
    par = np.abs(dirs) < 1e-300
    inside = (origins >= box_min[None, :]) & (origins <= box_max[None, :])
    t1f = np.where(par, np.where(inside, -np.inf, np.inf), t1f)
    t2f = np.where(par, np.where(inside, np.inf, -np.inf), t2f)
    t0 = t1f.max(axis=1)
    t1 = t2f.min(axis=1)
    hit = (t1 >= np.maximum(t0, 0.0))
    return np.maximum(t0, 0.0), t1, hit


def march_rays(sdf_fn, origins, dirs, t0, t1, steps: int):
    """Batched first-sign-change march with secant refinement.

    Returns (hit mask, t_hit). Rays with negative field at t0 hit at t0.
    """
    n = origins.shape[0]
    hit = np.zeros(n, dtype=bool)
    t_hit = np.full(n, np.nan)
    if n == 0:
        return hit, t_hit
    span = (t1 - t0) / (steps - 1)
    prev_s = np.asarray(sdf_fn(origins + t0[:, None] * dirs)).reshape(-1)
    inside = prev_s < 0.0
    hit[inside] = True
    t_hit[inside] = t0[inside]
    active = ~inside
    prev_t = t0.copy()
    for k in range(1, steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        tk = t0[idx] + span[idx] * k
        pts = origins[idx] + tk[:, None] * dirs[idx]
        s = np.asarray(sdf_fn(pts)).reshape(-1)
        cross = (prev_s[idx] > 0.0) & (s <= 0.0)
        if cross.any():
            ci = idx[cross]
            s0 = prev_s[ci]
            s1 = s[cross]
            ta = prev_t[ci]
            tb = tk[cross]
            t_hit[ci] = ta - s0 * (tb - ta) / (s1 - s0)
            hit[ci] = True
            active[ci] = False
        keep = idx[~cross]
        prev_s[keep] = s[~cross]
        prev_t[keep] = tk[~cross]
    return hit, t_hit


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class Patch:
    pixels: np.ndarray    # (H, W, 3) in [0, 1]
    mask: np.ndarray      # (H, W) bool
    kind: str             # "color" | "normal"
    provenance: str       # "real" | "rendered"

    def __post_init__(self):
        bg = np.full(3, BACKGROUND)
        self.pixels = np.where(self.mask[..., None], self.pixels, bg)

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass
class PatchLayout:
    image_size: int = 256
    patch_size: int = 32


def patch_rect(camera: Camera, point, size: int):
    """Patch rectangle centered on a projected world point, clamped to the
    image bounds. Returns (x0, y0)."""
    w, h = camera.resolution
    right, true_up, fwd = camera.basis()
    rel = np.asarray(point, dtype=np.float64) - camera.position
    z = rel @ fwd
    tan = np.tan(camera.fov_y / 2.0)
    px = ((rel @ right) / (z * tan * (w / h)) + 1.0) * 0.5 * w - 0.5
    py = (1.0 - (rel @ true_up) / (z * tan)) * 0.5 * h - 0.5
    x0 = int(np.clip(round(px - size / 2), 0, w - size))
    y0 = int(np.clip(round(py - size / 2), 0, h - size))
    return x0, y0


def real_patches(scan_mesh: TemplateMesh, joints: np.ndarray, cameras: Sequence[Camera],
                 layout: PatchLayout) -> List[dict]:
    """Rasterize the scan per camera and crop color/normal patches centered
    on the projected joints. Returns one record per (camera, joint)."""
    if scan_mesh.vertex_colors is None:
        raise RenderError("real patches need scan vertex colors")
    out = []
    p = layout.patch_size
    for ci, cam in enumerate(cameras):
        img = rasterize(scan_mesh, cam)
        for ji in range(joints.shape[0]):
            x0, y0 = patch_rect(cam, joints[ji], p)
            sl = np.s_[y0:y0 + p, x0:x0 + p]
            out.append({
                "camera": ci, "joint": ji, "rect": (x0, y0),
                "color": Patch(img.color[sl].copy(), img.mask[sl].copy(),
                               "color", "real"),
                "normal": Patch(img.normal[sl].copy(), img.mask[sl].copy(),
                                "normal", "real"),
            })
    return out


# ---------------------------------------------------------------------------
# field rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderTapes:
    """Tapes from the hit-point evaluations of one rendered patch."""

    color_tape: object          # QueryTape of the per-hit color evals
    normal_tape: object         # QueryTape of the 6 FD evals per hit
    grad: np.ndarray            # (n_hits, 3) raw FD gradient at the hits
    normals: np.ndarray         # (n_hits, 3) unit normals
    fd_eps: float
    hit_rows: np.ndarray
    hit_cols: np.ndarray
    shape: Tuple[int, int]


def _field_bbox(accel: AccelStructure, margin: float = 0.15):
    lo = accel.node_min[0]
    hi = accel.node_max[0]
    pad = margin * np.linalg.norm(hi - lo)
    return lo - pad, hi + pad


def render_patch(accel: AccelStructure, cb: Codebook, phi: DecoderWeights,
                 psi: DecoderWeights, camera: Camera, rect: Tuple[int, int],
                 patch_size: int, ray_steps: int = 48, fd_eps: float = 1e-3):
    """Ray-march the avatar field over a patch rectangle.

    Returns (color Patch, normal Patch, RenderTapes); gradients on the patch
    pixels can be pushed back through the tapes (hit positions are treated
    as constants).
    """
    w, h = camera.resolution
    x0, y0 = rect
    if not (0 <= x0 <= w - patch_size and 0 <= y0 <= h - patch_size):
        raise RenderError("patch rectangle outside the camera resolution")
    gx, gy = np.meshgrid(np.arange(x0, x0 + patch_size),
                         np.arange(y0, y0 + patch_size))
    dirs = camera.pixel_rays(gx.reshape(-1).astype(np.float64),
                             gy.reshape(-1).astype(np.float64))
    origins = np.broadcast_to(camera.position, dirs.shape).copy()

    lo, hi = _field_bbox(accel)
    t0, t1, inbox = _ray_box_range(origins, dirs, lo, hi)

    def sdf_fn(pts):
        s, _, _ = query_field_batch(accel, cb, phi, None, pts)
        return s

    hit = np.zeros(dirs.shape[0], dtype=bool)
    t_hit = np.full(dirs.shape[0], np.nan)
    ii = np.nonzero(inbox)[0]
    hh, tt = march_rays(sdf_fn, origins[ii], dirs[ii], t0[ii], t1[ii], ray_steps)
    hit[ii[hh]] = True
    t_hit[ii[hh]] = tt[hh]

    n_pix = patch_size * patch_size
    color_img = np.full((n_pix, 3), BACKGROUND)
    normal_img = np.full((n_pix, 3), BACKGROUND)
    hit_idx = np.nonzero(hit)[0]
    color_tape = normal_tape = None
    grad = np.zeros((hit_idx.size, 3))
    normals = np.zeros((hit_idx.size, 3))
    if hit_idx.size:
        x_hit = origins[hit_idx] + t_hit[hit_idx, None] * dirs[hit_idx]
        _, c, color_tape = query_field_batch(accel, cb, None, psi, x_hit)
        color_img[hit_idx] = c
        offs = fd_offsets(x_hit, fd_eps).reshape(-1, 3)
        s_off, _, normal_tape = query_field_batch(accel, cb, phi, None, offs)
        grad = gradient_from_offsets(s_off.reshape(-1, 6), fd_eps)
        nrm = np.linalg.norm(grad, axis=1, keepdims=True)
        normals = grad / np.maximum(nrm, 1e-300)
        normal_img[hit_idx] = (normals + 1.0) * 0.5

    mask = hit.reshape(patch_size, patch_size)
    color_patch = Patch(color_img.reshape(patch_size, patch_size, 3), mask,
                        "color", "rendered")
    normal_patch = Patch(normal_img.reshape(patch_size, patch_size, 3), mask,
                         "normal", "rendered")
    tapes = RenderTapes(color_tape=color_tape, normal_tape=normal_tape,
                        grad=grad, normals=normals, fd_eps=fd_eps,
                        hit_rows=hit_idx // patch_size,
                        hit_cols=hit_idx % patch_size,
                        shape=(patch_size, patch_size))
    return color_patch, normal_patch, tapes


def backward_render(tapes: RenderTapes, d_color: Optional[np.ndarray],
                    d_normal: Optional[np.ndarray]):
    """Push pixel gradients of a rendered patch back to the decoders and the
    codebook rows. Returns (phi grads | None, psi grads | None, cb grad)."""
    pg = cg = None
    cb_grad = None
    rows, cols = tapes.hit_rows, tapes.hit_cols
    if d_color is not None and tapes.color_tape is not None and rows.size:
        dc = d_color[rows, cols]
        _, cg, cb_grad = backward_query(tapes.color_tape, None, dc)
    if d_normal is not None and tapes.normal_tape is not None and rows.size:
        dn = d_normal[rows, cols] * 0.5          # remap (n+1)/2
        g = tapes.grad
        n = tapes.normals
        nrm = np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        dg = (dn - n * (n * dn).sum(axis=1, keepdims=True)) / nrm
        seed6 = np.empty((rows.size, 6))
        for k in range(3):
            seed6[:, 2 * k] = dg[:, k] / (2.0 * tapes.fd_eps)
            seed6[:, 2 * k + 1] = -dg[:, k] / (2.0 * tapes.fd_eps)
        pg, _, cb_g2 = backward_query(tapes.normal_tape, seed6.reshape(-1), None)
        cb_grad = cb_g2 if cb_grad is None else cb_grad + cb_g2
    return pg, cg, cb_grad


def render_field_image(sdf_fn, color_fn, camera: Camera, bbox=None,
                       ray_steps: int = 96, fd_eps: float = 1e-3):
    """Full-frame render of arbitrary field closures (no tapes).

    Returns (color, normal) images; normals from central differences of the
    scalar field, remapped to [0, 1].
    """
    w, h = camera.resolution
    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    dirs = camera.pixel_rays(gx.reshape(-1).astype(np.float64),
                             gy.reshape(-1).astype(np.float64))
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    if bbox is None:
        far = 2.0 * np.linalg.norm(camera.look_at - camera.position)
        t0 = np.zeros(dirs.shape[0])
        t1 = np.full(dirs.shape[0], far)
        inbox = np.ones(dirs.shape[0], dtype=bool)
    else:
        t0, t1, inbox = _ray_box_range(origins, dirs,
                                       np.asarray(bbox[0]), np.asarray(bbox[1]))
    hit = np.zeros(dirs.shape[0], dtype=bool)
    t_hit = np.full(dirs.shape[0], np.nan)
    ii = np.nonzero(inbox)[0]
    hh, tt = march_rays(sdf_fn, origins[ii], dirs[ii], t0[ii], t1[ii], ray_steps)
    hit[ii[hh]] = True
    t_hit[ii[hh]] = tt[hh]

    color = np.full((h * w, 3), BACKGROUND)
    normal = np.full((h * w, 3), BACKGROUND)
    idx = np.nonzero(hit)[0]
    if idx.size:
        x_hit = origins[idx] + t_hit[idx, None] * dirs[idx]
        color[idx] = np.clip(color_fn(x_hit), 0.0, 1.0)
        offs = fd_offsets(x_hit, fd_eps).reshape(-1, 3)
        s_off = np.asarray(sdf_fn(offs)).reshape(-1, 6)
        g = gradient_from_offsets(s_off, fd_eps)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        normal[idx] = (g + 1.0) * 0.5
    return color.reshape(h, w, 3), normal.reshape(h, w, 3)


def patch_to_png(pixels: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(pixels) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(str(path))


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DiscriminatorWeights:
    """Leaky-rectifier MLP over flattened patches: in -> 256 -> 128 -> 1."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    alpha: float = _LEAKY

    def params(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def set_params(self, params: List[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = list(params[:k])
        self.biases = list(params[k:])


def init_discriminator(patch_size: int, seed: int) -> DiscriminatorWeights:
    rng = np.random.default_rng(seed)
    dims = [3 * patch_size * patch_size, *_DISC_HIDDEN, 1]
    ws, bs = [], []
    for i in range(len(dims) - 1):
        ws.append(rng.normal(0.0, np.sqrt(1.0 / dims[i]), size=(dims[i], dims[i + 1])))
        bs.append(np.zeros(dims[i + 1]))
    return DiscriminatorWeights(ws, bs)


@dataclass
class DiscTape:
    inputs: List[np.ndarray]
    pre_acts: List[np.ndarray]


def disc_forward(disc: DiscriminatorWeights, x: np.ndarray):
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inputs = [a]
    pre = []
    for i in range(len(disc.weights) - 1):
        z = a @ disc.weights[i] + disc.biases[i]
        pre.append(z)
        a = np.where(z > 0.0, z, disc.alpha * z)
        inputs.append(a)
    y = a @ disc.weights[-1] + disc.biases[-1]
    return y[:, 0], DiscTape(inputs, pre)


def disc_backward(disc: DiscriminatorWeights, tape: DiscTape, dlogits: np.ndarray):
    """Gradients wrt discriminator parameters and the input patch."""
    g = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    k = len(disc.weights)
    wg = [None] * k
    bg = [None] * k
    wg[-1] = tape.inputs[-1].T @ g
    bg[-1] = g.sum(axis=0)
    ga = g @ disc.weights[-1].T
    for i in range(k - 2, -1, -1):
        m = np.where(tape.pre_acts[i] > 0.0, 1.0, disc.alpha)
        gz = ga * m
        wg[i] = tape.inputs[i].T @ gz
        bg[i] = gz.sum(axis=0)
        ga = gz @ disc.weights[i].T
    return wg, bg, ga


def disc_input_grad(disc: DiscriminatorWeights, tape: DiscTape) -> np.ndarray:
    """Per-sample gradient of the logit wrt the input (exact backprop)."""
    _, _, gx = disc_backward(disc, tape, np.ones(tape.inputs[0].shape[0]))
    return gx


def r1_terms(disc: DiscriminatorWeights, tape: DiscTape):
    """R1 penalty mean ||grad_x D||^2 on a batch plus its parameter gradients
    computed with the activation patterns held fixed (exact a.e. for the
    piecewise-linear discriminator). Bias gradients vanish identically.

    The input gradient is the chain t_j = s_{j+1} @ W_j^T with
    s_j = mask_{j-1} * t_j and s_k = 1; R1 gradients follow from running
    the adjoint of that chain.
    """
    b = tape.inputs[0].shape[0]
    masks = [np.where(z > 0.0, 1.0, disc.alpha) for z in tape.pre_acts]
    k = len(disc.weights)
    svec = [None] * (k + 1)
    tvec = [None] * k
    svec[k] = np.ones((b, 1))
    for j in range(k - 1, -1, -1):
        tvec[j] = svec[j + 1] @ disc.weights[j].T
        if j >= 1:
            svec[j] = masks[j - 1] * tvec[j]
    gx = tvec[0]
    r1 = float((gx * gx).sum() / b)

    dt = 2.0 * gx / b
    wg = [None] * k
    for j in range(k):
        wg[j] = dt.T @ svec[j + 1]
        if j < k - 1:
            dt = masks[j] * (dt @ disc.weights[j])
    bgs = [np.zeros_like(bb) for bb in disc.biases]
    return r1, wg, bgs


@dataclass
class GanLosses:
    l_dis: float            # discriminator objective incl. R1
    l_adv_dis: float        # adversarial part of the discriminator loss
    l_gen: float            # generator term softplus(-D(fake))
    r1: float
    disc_wgrads: List[np.ndarray]
    disc_bgrads: List[np.ndarray]
    d_fake_pixels: np.ndarray   # (P, H, W, 3) gradient of l_gen wrt fake pixels


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _stack_patches(patches):
    if isinstance(patches, Patch):
        patches = [patches]
    return np.stack([p.flat() for p in patches]), list(patches)


def gan_losses(disc: DiscriminatorWeights, real, fake, lambda_r1: float) -> GanLosses:
    """Non-saturating logistic GAN losses with R1 on the real patches."""
    x_real, real_list = _stack_patches(real)
    x_fake, fake_list = _stack_patches(fake)
    if x_real.shape[1] != x_fake.shape[1]:
        raise RenderError("real/fake patch shapes disagree")
    if any(p.kind != real_list[0].kind for p in real_list + fake_list):
        raise RenderError("mixed patch kinds in one GAN loss")
    br = x_real.shape[0]
    bf = x_fake.shape[0]

    y_real, tape_r = disc_forward(disc, x_real)
    y_fake, tape_f = disc_forward(disc, x_fake)

    l_adv_dis = float(_softplus(-y_real).mean() + _softplus(y_fake).mean())
    r1, r1_wg, r1_bg = r1_terms(disc, tape_r)
    l_dis = l_adv_dis + lambda_r1 * r1

    wg_r, bg_r, _ = disc_backward(disc, tape_r, -_sigmoid(-y_real) / br)
    wg_f, bg_f, _ = disc_backward(disc, tape_f, _sigmoid(y_fake) / bf)
    dw = [a + b + lambda_r1 * c for a, b, c in zip(wg_r, wg_f, r1_wg)]
    db = [a + b + lambda_r1 * c for a, b, c in zip(bg_r, bg_f, r1_bg)]

    l_gen = float(_softplus(-y_fake).mean())
    _, _, d_fake = disc_backward(disc, tape_f, -_sigmoid(-y_fake) / bf)
    hw = fake_list[0].pixels.shape
    return GanLosses(l_dis=l_dis, l_adv_dis=l_adv_dis, l_gen=l_gen, r1=r1,
                     disc_wgrads=dw, disc_bgrads=db,
                     d_fake_pixels=d_fake.reshape(bf, *hw))


# ---------------------------------------------------------------------------
# training integration
# ---------------------------------------------------------------------------

def build_patch_banks(prepared, cfg) -> None:
    """Rasterize every scan once per ring camera and cache joint patches."""
    layout = PatchLayout(cfg.image_size, cfg.patch_size)
    for prep in prepared:
        mesh = prep.posed_template
        if mesh.joints is None:
            raise RenderError("adversarial training needs a rigged template")
        center = mesh.joints[0]
        cams = camera_ring(center, radius=cfg.camera_radius,
                           resolution=(cfg.image_size, cfg.image_size))
        prep.patch_bank = {
            "cameras": cams,
            "patches": real_patches(prep.scan.mesh, mesh.joints, cams, layout),
        }


def adversarial_update(state, prepared, cfg, rng, grads) -> Tuple[float, float]:
    """One adversarial round: sample a codebook, render fake patches, step
    both discriminators, and add generator gradients into `grads`.

    Returns (generator loss, discriminator loss) summed over patch kinds.
    """
    from .training import adam_step

    mesh = prepared[0].posed_template
    m = mesh.num_vertices
    f = state.feature_dim
    n = state.dict_s.num_subjects

    # on-the-fly PCA sampling (recomputed each call; V and the Cholesky
    # factor are treated as constants of the draw)
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("ignore")
        pca_s = pca_fit(state.dict_s, cfg.pca_dim_geometry)
        pca_c = pca_fit(state.dict_c, cfg.pca_dim_texture)
    k_s = pca_sample_coeffs(pca_s, rng)
    k_c = pca_sample_coeffs(pca_c, rng)
    row_s = pca_s.mean + k_s @ pca_s.eigvecs
    row_c = pca_c.mean + k_c @ pca_c.eigvecs
    cb_r = codebook_from_rows(row_s, row_c, m, f)

    prep = prepared[int(rng.integers(len(prepared)))]
    bank = prep.patch_bank
    rec = bank["patches"][int(rng.integers(len(bank["patches"])))]
    cam = bank["cameras"][rec["camera"]]

    accel = accel_of(prep.posed_template)
    fake_color, fake_normal, tapes = render_patch(
        accel, cb_r, state.phi, state.psi, cam, rec["rect"], cfg.patch_size,
        ray_steps=cfg.ray_steps, fd_eps=cfg.render_fd_eps)

    l_gen_total = 0.0
    l_dis_total = 0.0
    d_color = d_normal = None
    for kind, disc_name, real_p, fake_p in (
            ("color", "disc_color", rec["color"], fake_color),
            ("normal", "disc_normal", rec["normal"], fake_normal)):
        disc = getattr(state, disc_name)
        res = gan_losses(disc, real_p, fake_p, cfg.lambda_r1)
        l_gen_total += res.l_gen
        l_dis_total += res.l_dis
        new_p, state.adam[disc_name] = adam_step(
            disc.params(), res.disc_wgrads + res.disc_bgrads,
            state.adam[disc_name], cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps)
        disc.set_params(new_p)
        if kind == "color":
            d_color = res.d_fake_pixels[0]
        else:
            d_normal = res.d_fake_pixels[0]

    pg, cg, cb_grad = backward_render(tapes, d_color, d_normal)
    if pg is not None:
        for j in range(len(pg.weights)):
            grads["phi"][j] += pg.weights[j]
            grads["phi"][j + len(pg.weights)] += pg.biases[j]
    if cg is not None:
        for j in range(len(cg.weights)):
            grads["psi"][j] += cg.weights[j]
            grads["psi"][j + len(cg.weights)] += cg.biases[j]
    if cb_grad is not None:
        # sampled codebooks depend on every dictionary row through the mean
        grads["dict_s"] += cb_grad[:, :f].reshape(-1)[None, :] / n
        grads["dict_c"] += cb_grad[:, f:].reshape(-1)[None, :] / n
    return l_gen_total, l_dis_total
