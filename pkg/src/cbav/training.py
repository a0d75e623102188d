"""Auto-decoder training: synthetic scans, thin-shell supervision samples,
the 3D losses, Adam, and the training loop.

Per iteration a batch of subjects is selected; fresh points are sampled in a
thin shell around each subject's scan; the distance/color losses update the
shared decoders and only those subjects' dictionary rows. The Frobenius
regularizer is evaluated on the batch rows so that this locality is exact.
With the adversarial branch enabled, a randomly sampled codebook is rendered
to fake patches and the generator gradients reach the entire dictionaries
through the sampling mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .codebook import Dictionary, init_dictionary, subject_codebook
from .field import (DecoderWeights, fd_offsets, gradient_from_offsets,
                    init_decoder, query_field_batch, backward_query)
from .geometry.bvh import accel_of, closest_points_batch
from .geometry.local import _pseudo_normals_batch
from .geometry.mesh import MeshError, TemplateMesh
from .geometry.skinning import PoseParams, skin


class NumericAbort(RuntimeError):
    """A loss or gradient became non-finite; training state is poisoned."""


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Loss weights and optimizer constants default to the published values;
    scale knobs (points, batch, feature width) are overridden per preset."""

    lambda_n: float = 1e-2
    lambda_sdf: float = 1e3
    lambda_rgb: float = 1e2
    lambda_reg: float = 1e-3
    lambda_r1: float = 10.0
    points_per_iter: int = 20480
    batch_subjects: int = 8
    lr: float = 1e-3
    lr_decay: float = 1.0     # final lr as a fraction of lr (cosine schedule); 1 = constant
    dict_lr_scale: float = 1.0  # dictionary rows see lr * this (each row gets ~batch/N of the decoder's update count)
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    epochs: int = 300
    seed: int = 0
    shell_sigmas: tuple = (0.005, 0.025)   # fractions of the scan bbox diagonal
    adversarial: bool = False
    feature_dim: int = 32
    pca_dim_geometry: int = 16
    pca_dim_texture: int = 8
    fd_eps: float = 1e-4
    checkpoint_every: int = 100
    # adversarial rendering scale
    image_size: int = 256
    patch_size: int = 32
    ray_steps: int = 48
    camera_radius: float = 2.0
    render_fd_eps: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_n", "lambda_sdf", "lambda_rgb", "lambda_reg", "lambda_r1"):
            if getattr(self, name) < 0:
                raise TrainingError(f"{name} must be >= 0")
        for name in ("points_per_iter", "batch_subjects", "epochs", "feature_dim"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# synthetic scans
# ---------------------------------------------------------------------------

@dataclass
class Scan:
    """A watertight colored mesh with the registered template pose."""

    mesh: TemplateMesh
    pose: PoseParams
    subject_id: int = 0


def synth_scan(template: TemplateMesh, seed: int, amplitude: float = 0.03,
               subject_id: int = 0) -> Scan:
    """Deterministic synthetic subject: the template deformed by band-limited
    smooth offsets and painted with region palettes plus stripes.

    amplitude bounds the offset magnitude as a fraction of the bbox diagonal
    (<= 5%); the identity pose is recorded as the registration.
    """
    if amplitude > 0.05:
        raise TrainingError("deformation amplitude above 5% of the bbox diagonal")
    rng = np.random.default_rng(seed)
    v = template.vertices
    diag = template.bbox_diagonal()

    n_waves = 6
    proj = rng.normal(size=(n_waves, 3))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    freqs = rng.uniform(0.5, 2.5, n_waves) * (2.0 * np.pi / diag)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(0.3, 1.0, n_waves)
    amps *= amplitude * diag / amps.sum()

    offset = np.zeros_like(v)
    for k in range(n_waves):
        phase = v @ (proj[k] * freqs[k]) + phases[k]
        offset += amps[k] * np.sin(phase)[:, None] * dirs[k]

    # region palette from the dominant joint (z-bands when unrigged)
    if template.has_rig:
        region = np.argmax(template.skinning_weights, axis=1)
        n_regions = template.num_joints
    else:
        z = v[:, 1]
        n_regions = 4
        region = np.minimum((n_regions * (z - z.min()) / max(np.ptp(z), 1e-12)).astype(int),
                            n_regions - 1)
    palette = rng.uniform(0.15, 0.9, size=(n_regions, 3))
    stripe_axis = rng.normal(size=3)
    stripe_axis /= np.linalg.norm(stripe_axis)
    stripe_freq = rng.uniform(4.0, 9.0) * (2.0 * np.pi / diag)
    stripes = 0.8 + 0.2 * np.sin(v @ stripe_axis * stripe_freq + rng.uniform(0, 2 * np.pi))
    colors = np.clip(palette[region] * stripes[:, None], 0.0, 1.0)

    mesh = TemplateMesh(v + offset, template.faces.copy(),
                        joints=None if template.joints is None else template.joints.copy(),
                        parents=None if template.parents is None else template.parents.copy(),
                        skinning_weights=None if template.skinning_weights is None
                        else template.skinning_weights.copy(),
                        vertex_colors=colors)
    if not mesh.is_watertight():
        raise MeshError("synthetic scan is not watertight")
    pose = PoseParams.identity(template.num_joints, template.num_blendshapes)
    return Scan(mesh=mesh, pose=pose, subject_id=subject_id)


# ---------------------------------------------------------------------------
# supervision samples
# ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    """Thin-shell supervision points with ground truth from the scan surface."""

    x_g: np.ndarray    # (B, 3)
    s_gt: np.ndarray   # (B,)
    c_gt: np.ndarray   # (B, 3)
    n_gt: np.ndarray   # (B, 3) unit

    def __len__(self):
        return self.x_g.shape[0]


def sample_points(scan: Scan, n: int, seed,
                  sigmas: Sequence[float] = (0.005, 0.025)) -> SampleBatch:
    """Area-weighted surface samples perturbed by truncated Gaussians.

    Half the points use each sigma (fractions of the scan bbox diagonal);
    displacements are clipped to 3 sigma, which bounds |s_gt| by the shell
    width. Sign from the angle-weighted pseudo-normal (watertight scans).
    """
    mesh = scan.mesh
    if not mesh.is_watertight():
        raise MeshError("sample_points needs a watertight scan (sign undefined)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    accel = accel_of(mesh)
    diag = mesh.bbox_diagonal()

    areas = mesh.face_areas()
    fidx = rng.choice(mesh.num_faces, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = r1 * r2
    tri = mesh.triangles()[fidx]
    base = u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]

    sig = np.empty(n)
    half = n // 2
    sig[:half] = sigmas[0] * diag
    sig[half:] = sigmas[1] * diag
    disp = rng.normal(size=(n, 3)) * sig[:, None]
    norms = np.linalg.norm(disp, axis=1)
    over = norms > 3.0 * sig
    if over.any():
        disp[over] *= (3.0 * sig[over] / norms[over])[:, None]
    x = base + disp

    faces, bary2, cpts, dist = closest_points_batch(accel, x)
    pn = _pseudo_normals_batch(accel, faces, bary2)
    side = ((x - cpts) * pn).sum(axis=1)
    s_gt = np.where(side >= 0.0, dist, -dist)

    bary3 = np.stack([bary2[:, 0], bary2[:, 1], 1.0 - bary2[:, 0] - bary2[:, 1]], axis=1)
    corners = mesh.faces[faces]
    vn = mesh.vertex_normals()
    n_gt = np.einsum("bk,bkd->bd", bary3, vn[corners])
    n_gt /= np.maximum(np.linalg.norm(n_gt, axis=1, keepdims=True), 1e-300)
    if mesh.vertex_colors is None:
        raise MeshError("scan mesh has no vertex colors")
    c_gt = np.einsum("bk,bkd->bd", bary3, mesh.vertex_colors[corners])
    return SampleBatch(x_g=x, s_gt=s_gt, c_gt=np.clip(c_gt, 0.0, 1.0), n_gt=n_gt)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class Loss3D:
    total: float
    l_sdf: float
    l_rgb: float
    d_s: np.ndarray       # (B,) gradient wrt predicted distances
    d_grad_s: np.ndarray  # (B, 3) gradient wrt the FD spatial gradient
    d_c: np.ndarray       # (B, 3) gradient wrt predicted colors


def loss_3d(s: np.ndarray, c: np.ndarray, grad_s: np.ndarray,
            s_gt: np.ndarray, c_gt: np.ndarray, n_gt: np.ndarray,
            cfg: TrainConfig) -> Loss3D:
    """L1 distance + normal-alignment + L1 color losses with their exact
    gradient seeds (sign convention: subgradient 0 at ties)."""
    b = s.shape[0]
    if not (c.shape == c_gt.shape and grad_s.shape == n_gt.shape and s_gt.shape == s.shape):
        raise TrainingError("loss batch shapes disagree")
    err_s = s - s_gt
    l_dist = np.abs(err_s).mean()
    align = 1.0 - (n_gt * grad_s).sum(axis=1)
    l_norm = np.abs(align).mean()
    l_sdf = l_dist + cfg.lambda_n * l_norm
    err_c = c - c_gt
    l_rgb = np.abs(err_c).sum(axis=1).mean()
    total = cfg.lambda_sdf * l_sdf + cfg.lambda_rgb * l_rgb

    d_s = cfg.lambda_sdf * np.sign(err_s) / b
    d_align = -cfg.lambda_sdf * cfg.lambda_n * np.sign(align) / b
    d_grad_s = d_align[:, None] * n_gt
    d_c = cfg.lambda_rgb * np.sign(err_c) / b
    return Loss3D(total=float(total), l_sdf=float(l_sdf), l_rgb=float(l_rgb),
                  d_s=d_s, d_grad_s=d_grad_s, d_c=d_c)


def loss_reg(dict_s: np.ndarray, dict_c: np.ndarray):
    """Sum of Frobenius norms with gradients D/||D||_F (0 at D = 0)."""
    total = 0.0
    grads = []
    for d in (dict_s, dict_c):
        nrm = float(np.sqrt((d * d).sum()))
        total += nrm
        grads.append(np.zeros_like(d) if nrm == 0.0 else d / nrm)
    return total, grads[0], grads[1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @staticmethod
    def for_params(params: List[np.ndarray]) -> "AdamState":
        return AdamState(0, [np.zeros_like(p) for p in params],
                         [np.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState(self.t, [m.copy() for m in self.m], [v.copy() for v in self.v])


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.0, beta2: float = 0.99,
              eps: float = 1e-8):
    """Standard bias-corrected Adam; returns (new params, new state)."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise TrainingError("parameter/gradient shapes disagree")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps)
        new_p.append(p - update)
        new_m.append(m2)
        new_v.append(v2)
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# training state and loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    dict_s: Dictionary
    dict_c: Dictionary
    phi: DecoderWeights
    psi: DecoderWeights
    adam: dict                      # name -> AdamState
    rng: np.random.Generator
    iteration: int = 0
    disc_color: object = None       # DiscriminatorWeights when adversarial
    disc_normal: object = None

    @property
    def feature_dim(self) -> int:
        return self.phi.feature_dim


@dataclass
class PreparedScan:
    scan: Scan
    posed_template: TemplateMesh
    patch_bank: Optional[list] = None


@dataclass
class TrainResult:
    state: TrainState
    trace: List[dict]


def _finite_or_abort(value, label: str, iteration: int):
    arr = np.asarray(value)
    if not np.isfinite(arr).all():
        raise NumericAbort(f"non-finite {label} at iteration {iteration}")


def scheduled_lr(cfg: TrainConfig, iteration: int, total: int) -> float:
    """Cosine decay from lr to lr * lr_decay over the run."""
    if cfg.lr_decay >= 1.0 or total <= 1:
        return cfg.lr
    t = min(max(iteration - 1, 0) / (total - 1), 1.0)
    w = 0.5 * (1.0 + np.cos(np.pi * t))
    return cfg.lr * (cfg.lr_decay + (1.0 - cfg.lr_decay) * w)


def init_train_state(template: TemplateMesh, n_subjects: int, cfg: TrainConfig) -> TrainState:
    f = cfg.feature_dim
    m = template.num_vertices
    rng = np.random.default_rng(cfg.seed)
    dict_s = init_dictionary(n_subjects, m, f, cfg.seed * 4 + 1, kind="shape")
    dict_c = init_dictionary(n_subjects, m, f, cfg.seed * 4 + 2, kind="color")
    phi = init_decoder(f, 1, seed=cfg.seed * 4 + 3, out_activation="none")
    psi = init_decoder(f, 3, seed=cfg.seed * 4 + 4, out_activation="sigmoid")
    adam = {
        "dict_s": AdamState.for_params([dict_s.entries]),
        "dict_c": AdamState.for_params([dict_c.entries]),
        "phi": AdamState.for_params(phi.params()),
        "psi": AdamState.for_params(psi.params()),
    }
    state = TrainState(dict_s=dict_s, dict_c=dict_c, phi=phi, psi=psi,
                       adam=adam, rng=rng, iteration=0)
    if cfg.adversarial:
        from .adversarial import init_discriminator
        state.disc_color = init_discriminator(cfg.patch_size, seed=cfg.seed * 4 + 5)
        state.disc_normal = init_discriminator(cfg.patch_size, seed=cfg.seed * 4 + 6)
        state.adam["disc_color"] = AdamState.for_params(state.disc_color.params())
        state.adam["disc_normal"] = AdamState.for_params(state.disc_normal.params())
    return state


def prepare_scans(template: TemplateMesh, scans: Sequence[Scan]) -> List[PreparedScan]:
    prepared = []
    for scan in scans:
        posed = template if scan.pose.is_identity() else skin(template, scan.pose)
        prepared.append(PreparedScan(scan=scan, posed_template=posed))
    return prepared


def subject_batch_losses(state: TrainState, prepared: List[PreparedScan],
                         subjects: Sequence[int], cfg: TrainConfig,
                         rng: np.random.Generator):
    """Sample fresh points for each batch subject, evaluate the field, and
    accumulate 3D-loss gradients. Returns (l_sdf, l_rgb, grads dict)."""
    m = prepared[0].posed_template.num_vertices
    f = state.feature_dim
    n_total = cfg.points_per_iter
    per = [n_total // len(subjects)] * len(subjects)
    per[0] += n_total - sum(per)

    g_dict_s = np.zeros_like(state.dict_s.entries)
    g_dict_c = np.zeros_like(state.dict_c.entries)
    g_phi = [np.zeros_like(p) for p in state.phi.params()]
    g_psi = [np.zeros_like(p) for p in state.psi.params()]
    l_sdf_acc = l_rgb_acc = 0.0

    by_id = {p.scan.subject_id: p for p in prepared}
    for si, n_i in zip(subjects, per):
        prep = by_id[si]
        batch = sample_points(prep.scan, n_i, rng, cfg.shell_sigmas)
        accel = accel_of(prep.posed_template)
        cb = subject_codebook(state.dict_s, state.dict_c, si, m, f)

        s, c, tape = query_field_batch(accel, cb, state.phi, state.psi, batch.x_g)
        offs = fd_offsets(batch.x_g, cfg.fd_eps).reshape(-1, 3)
        s_off, _, tape_off = query_field_batch(accel, cb, state.phi, None, offs)
        grad_s = gradient_from_offsets(s_off.reshape(n_i, 6), cfg.fd_eps)

        res = loss_3d(s, c, grad_s, batch.s_gt, batch.c_gt, batch.n_gt, cfg)
        scale = n_i / n_total
        l_sdf_acc += scale * res.l_sdf
        l_rgb_acc += scale * res.l_rgb

        pg, cg, cb_grad = backward_query(tape, scale * res.d_s, scale * res.d_c)
        # seeds for the six finite-difference taps: +/- 1/(2 eps) per axis
        seed6 = np.empty((n_i, 6))
        for k in range(3):
            g = scale * res.d_grad_s[:, k] / (2.0 * cfg.fd_eps)
            seed6[:, 2 * k] = g
            seed6[:, 2 * k + 1] = -g
        pg2, _, cb_grad2 = backward_query(tape_off, seed6.reshape(-1), None)

        for tg in (pg, pg2):
            for j, (wg, bg) in enumerate(zip(tg.weights, tg.biases)):
                g_phi[j] += wg
                g_phi[j + len(tg.weights)] += bg
        for j, (wg, bg) in enumerate(zip(cg.weights, cg.biases)):
            g_psi[j] += wg
            g_psi[j + len(cg.weights)] += bg

        total_cb = cb_grad + cb_grad2
        g_dict_s[si] += total_cb[:, :f].reshape(-1)
        g_dict_c[si] += total_cb[:, f:].reshape(-1)

    return l_sdf_acc, l_rgb_acc, {"dict_s": g_dict_s, "dict_c": g_dict_c,
                                  "phi": g_phi, "psi": g_psi}


def train(template: TemplateMesh, scans: Sequence[Scan], cfg: TrainConfig,
          checkpoint_sink: Optional[Callable] = None,
          resume_state: Optional[TrainState] = None,
          trace_sink: Optional[Callable] = None) -> TrainResult:
    """Run the auto-decoder loop; fixed seed gives a bit-reproducible trace.

    checkpoint_sink(state) fires every cfg.checkpoint_every iterations and at
    the end; trace_sink(row) per iteration.
    """
    if not scans:
        raise TrainingError("no scans to train on")
    ids = sorted(s.subject_id for s in scans)
    n = len(scans)
    if ids != list(range(n)):
        raise TrainingError("subject ids must be dense in [0, N)")

    prepared = prepare_scans(template, scans)
    state = resume_state if resume_state is not None \
        else init_train_state(template, n, cfg)

    if cfg.adversarial:
        from .adversarial import build_patch_banks
        build_patch_banks(prepared, cfg)

    iters_per_epoch = (n + cfg.batch_subjects - 1) // cfg.batch_subjects
    total_iters = cfg.epochs * iters_per_epoch
    trace: List[dict] = []

    while state.iteration < total_iters:
        it = state.iteration + 1
        rng = state.rng
        subjects = rng.permutation(n)[:min(cfg.batch_subjects, n)]
        subjects = [int(s) for s in subjects]

        l_sdf, l_rgb, grads = subject_batch_losses(state, prepared, subjects, cfg, rng)

        # Frobenius regularizer on the batch rows keeps 3D updates local
        rows = np.array(subjects, dtype=np.int64)
        l_reg, gr_s, gr_c = loss_reg(state.dict_s.entries[rows], state.dict_c.entries[rows])
        grads["dict_s"][rows] += cfg.lambda_reg * gr_s
        grads["dict_c"][rows] += cfg.lambda_reg * gr_c

        l_adv = 0.0
        l_dis = 0.0
        if cfg.adversarial:
            from .adversarial import adversarial_update
            l_adv, l_dis = adversarial_update(state, prepared, cfg, rng, grads)

        _finite_or_abort([l_sdf, l_rgb, l_reg, l_adv, l_dis], "loss", it)
        for gg in grads.values():
            for g in (gg if isinstance(gg, list) else [gg]):
                _finite_or_abort(g, "gradient", it)

        lr_t = scheduled_lr(cfg, it, total_iters)
        lr_d = lr_t * cfg.dict_lr_scale
        new_d, state.adam["dict_s"] = adam_step(
            [state.dict_s.entries], [grads["dict_s"]], state.adam["dict_s"],
            lr_d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        state.dict_s.entries = new_d[0]
        new_d, state.adam["dict_c"] = adam_step(
            [state.dict_c.entries], [grads["dict_c"]], state.adam["dict_c"],
            lr_d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        state.dict_c.entries = new_d[0]
        new_p, state.adam["phi"] = adam_step(
            state.phi.params(), grads["phi"], state.adam["phi"],
            lr_t, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        state.phi.set_params(new_p)
        new_p, state.adam["psi"] = adam_step(
            state.psi.params(), grads["psi"], state.adam["psi"],
            lr_t, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        state.psi.set_params(new_p)

        state.iteration = it
        row = {"iteration": it, "l_sdf": l_sdf, "l_rgb": l_rgb,
               "l_reg": l_reg, "l_adv": l_adv}
        trace.append(row)
        if trace_sink is not None:
            trace_sink(row)
        if checkpoint_sink is not None and (it % cfg.checkpoint_every == 0
                                            or it == total_iters):
            checkpoint_sink(state)

    return TrainResult(state=state, trace=trace)
