import numpy as np
import pytest

import cbav.adversarial as adv
import cbav.field as fl
from cbav.codebook import Codebook
from cbav.geometry import Camera, accel_of, make_icosphere, rasterize
from cbav.training import AdamState, adam_step, synth_scan


def sphere_sdf(pts):
    return np.linalg.norm(np.atleast_2d(pts), axis=1) - 1.0


# -- camera ring ---------------------------------------------------------------

def test_camera_ring_geometry():
    center = np.array([0.5, 1.0, -0.25])
    cams = adv.camera_ring(center, radius=2.0)
    assert len(cams) == 4
    assert np.abs(cams[0].position - (center + [2.0, 0.0, 0.0])).max() < 1e-12
    for cam in cams:
        assert abs(np.linalg.norm(cam.position - center) - 2.0) < 1e-12
        assert np.array_equal(cam.look_at, center)
    # opposite cameras are antipodal about the center
    assert np.abs((cams[0].position - center) + (cams[2].position - center)).max() < 1e-12
    assert np.abs((cams[1].position - center) + (cams[3].position - center)).max() < 1e-12
    with pytest.raises(adv.RenderError):
        adv.camera_ring(center, radius=0.0)


# -- ray intersection ------------------------------------------------------------

def test_intersect_ray_sphere_analytic():
    ray = adv.Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]), (0.5, 5.0))
    coarse = adv.intersect_ray(sphere_sdf, ray, steps=16)
    assert coarse is not None
    t, x = coarse
    assert abs(t - 2.0) < (5.0 - 0.5) / 15     # within one coarse step
    refined = adv.intersect_ray(sphere_sdf, ray, steps=128)
    t, x = refined
    assert abs(t - 2.0) < 1e-4
    assert np.abs(x - [0.0, 0.0, -1.0]).max() < 1e-4


def test_intersect_ray_miss():
    ray = adv.Ray(np.array([0.0, 3.0, -3.0]), np.array([0.0, 0.0, 1.0]), (0.0, 10.0))
    assert adv.intersect_ray(sphere_sdf, ray, steps=64) is None


def test_intersect_ray_inside_start():
    ray = adv.Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), (0.0, 5.0))
    hit = adv.intersect_ray(sphere_sdf, ray, steps=32)
    assert hit is not None
    assert hit[0] == 0.0


def test_intersect_ray_hit_inside_bracket():
    rng = np.random.default_rng(0)
    for _ in range(20):
        origin = rng.normal(size=3)
        origin = origin / np.linalg.norm(origin) * 3.0
        direction = -origin / np.linalg.norm(origin)
        ray = adv.Ray(origin, direction, (0.0, 6.0))
        steps = 40
        hit = adv.intersect_ray(sphere_sdf, ray, steps=steps)
        assert hit is not None
        ts = np.linspace(0, 6.0, steps)
        vals = sphere_sdf(origin[None, :] + ts[:, None] * direction[None, :])
        cross = np.nonzero((vals[:-1] > 0) & (vals[1:] <= 0))[0]
        assert cross.size
        i = cross[0]
        assert ts[i] <= hit[0] <= ts[i + 1]


def test_march_rays_matches_single_ray():
    rng = np.random.default_rng(1)
    n = 30
    origins = rng.normal(size=(n, 3))
    origins = origins / np.linalg.norm(origins, axis=1, keepdims=True) * 3.0
    dirs = -origins / 3.0
    t0 = np.zeros(n)
    t1 = np.full(n, 6.0)
    hit, t_hit = adv.march_rays(sphere_sdf, origins, dirs, t0, t1, steps=64)
    assert hit.all()
    for i in range(0, n, 7):
        single = adv.intersect_ray(sphere_sdf, adv.Ray(origins[i], dirs[i], (0.0, 6.0)), 64)
        assert abs(single[0] - t_hit[i]) < 1e-12


def test_march_rays_no_hit_without_sign_change():
    origins = np.array([[0.0, 2.0, -3.0]])
    dirs = np.array([[0.0, 0.0, 1.0]])
    hit, _ = adv.march_rays(sphere_sdf, origins, dirs, np.zeros(1), np.full(1, 8.0), 64)
    assert not hit.any()


# -- constructed-field rendering -------------------------------------------------

def _distance_phi(f):
    phi = fl.init_decoder(f, 1, seed=0)
    for w in phi.weights:
        w[:] = 0.0
    for b in phi.biases:
        b[:] = 0.0
    d_slot = f + 2
    phi.weights[0][d_slot, 0] = 1.0
    phi.weights[0][d_slot, 1] = -1.0
    for i in (1, 2):
        phi.weights[i][0, 0] = 1.0
        phi.weights[i][1, 1] = 1.0
    phi.weights[3][0, 0] = 1.0
    phi.weights[3][1, 0] = -1.0
    return phi


def _constant_color_psi(f, color):
    psi = fl.init_decoder(f, 3, seed=1, out_activation="sigmoid")
    for w in psi.weights:
        w[:] = 0.0
    for b in psi.biases:
        b[:] = 0.0
    c = np.asarray(color)
    psi.biases[-1][:] = np.log(c / (1.0 - c))
    return psi


@pytest.fixture(scope="module")
def sphere_field():
    mesh = make_icosphere(3)
    accel = accel_of(mesh)
    f = 4
    phi = _distance_phi(f)
    psi = _constant_color_psi(f, [0.8, 0.3, 0.2])
    cb = Codebook(np.zeros((mesh.num_vertices, 2 * f)), f)
    return mesh, accel, cb, phi, psi


def test_render_patch_constant_color_sphere(sphere_field):
    mesh, accel, cb, phi, psi = sphere_field
    cam = Camera(np.array([0.0, 0.0, 2.5]), np.zeros(3), np.array([0.0, 1.0, 0.0]),
                 0.9, (64, 64))
    color, normal, tapes = adv.render_patch(accel, cb, phi, psi, cam,
                                            rect=(16, 16), patch_size=32,
                                            ray_steps=96)
    assert color.mask.any()
    interior = color.pixels[color.mask]
    assert np.abs(interior - [0.8, 0.3, 0.2]).max() < 1.0 / 255.0
    # normal patch at the center looks back at the camera within 5 degrees
    cy, cx = 16, 16   # patch center (32x32 patch at rect 16,16 covers image center)
    n = normal.pixels[cy, cx] * 2.0 - 1.0
    view = np.array([0.0, 0.0, 1.0])
    angle = np.degrees(np.arccos(np.clip(n @ view / np.linalg.norm(n), -1, 1)))
    assert angle < 5.0
    # stored normals are unit length before remapping
    hit_n = tapes.normals
    assert np.abs(np.linalg.norm(hit_n, axis=1) - 1.0).max() < 1e-3


def test_render_patch_camera_looking_away(sphere_field):
    mesh, accel, cb, phi, psi = sphere_field
    cam = Camera(np.array([0.0, 0.0, 4.0]), np.array([0.0, 0.0, 9.0]),
                 np.array([0.0, 1.0, 0.0]), 0.9, (64, 64))
    color, normal, _ = adv.render_patch(accel, cb, phi, psi, cam,
                                        rect=(0, 0), patch_size=32, ray_steps=32)
    assert not color.mask.any()
    assert np.abs(color.pixels - adv.BACKGROUND).max() == 0.0
    assert np.abs(normal.pixels - adv.BACKGROUND).max() == 0.0


def test_render_patch_rect_validation(sphere_field):
    mesh, accel, cb, phi, psi = sphere_field
    cam = Camera(np.array([0.0, 0.0, 2.5]), np.zeros(3), np.array([0.0, 1.0, 0.0]),
                 0.9, (64, 64))
    with pytest.raises(adv.RenderError):
        adv.render_patch(accel, cb, phi, psi, cam, rect=(60, 0), patch_size=32)


def test_render_vs_raster_consistency(sphere_field):
    # the field represents the icosphere with a constant color; rasterizing
    # the same mesh must agree up to discretization
    mesh, accel, cb, phi, psi = sphere_field
    colored = type(mesh)(mesh.vertices.copy(), mesh.faces.copy(),
                         vertex_colors=np.tile([0.8, 0.3, 0.2],
                                               (mesh.num_vertices, 1)))
    cam = Camera(np.array([0.0, 0.0, 2.5]), np.zeros(3), np.array([0.0, 1.0, 0.0]),
                 0.9, (64, 64))
    raster = rasterize(colored, cam)
    color, _, _ = adv.render_patch(accel, cb, phi, psi, cam, rect=(16, 16),
                                   patch_size=32, ray_steps=96)
    real = raster.color[16:48, 16:48]
    diff = np.abs(color.pixels - real).mean()
    assert diff < 0.05
    agree = (raster.mask[16:48, 16:48] == color.mask).mean()
    assert agree > 0.95


def test_real_patches_layout(humanoid):
    scan = synth_scan(humanoid, seed=4)
    layout = adv.PatchLayout(image_size=128, patch_size=24)
    cams = adv.camera_ring(humanoid.joints[0], radius=2.0, angles=(0.0, 180.0),
                           resolution=(128, 128))
    recs = adv.real_patches(scan.mesh, humanoid.joints, cams, layout)
    assert len(recs) == 2 * humanoid.num_joints
    for rec in recs:
        assert rec["color"].pixels.shape == (24, 24, 3)
        assert rec["color"].kind == "color" and rec["normal"].kind == "normal"
        assert rec["color"].provenance == "real"
        x0, y0 = rec["rect"]
        assert 0 <= x0 <= 128 - 24 and 0 <= y0 <= 128 - 24
    # joint-centered patches of a full-body view are mostly foreground
    assert np.mean([r["color"].mask.mean() for r in recs]) > 0.3


def test_background_only_crop_fully_masked(humanoid):
    scan = synth_scan(humanoid, seed=4)
    cam = adv.camera_ring(humanoid.joints[0], radius=2.0, angles=(0.0,),
                          resolution=(128, 128))[0]
    img = rasterize(scan.mesh, cam)
    corner = img.mask[:16, :16]
    assert not corner.any()
    patch = adv.Patch(img.color[:16, :16], corner, "color", "real")
    assert not patch.mask.any()
    assert np.abs(patch.pixels - adv.BACKGROUND).max() == 0.0


# -- discriminator and GAN losses -------------------------------------------------

def _toy_patch(value, size=8, kind="color", provenance="real"):
    return adv.Patch(np.full((size, size, 3), float(value)),
                     np.ones((size, size), dtype=bool), kind, provenance)


def test_disc_forward_backward_fd():
    rng = np.random.default_rng(5)
    disc = adv.init_discriminator(8, seed=6)
    x = rng.normal(size=(3, 8 * 8 * 3))
    y, tape = adv.disc_forward(disc, x)
    seed = rng.normal(size=3)
    wg, bg, gx = adv.disc_backward(disc, tape, seed)
    h = 1e-5

    def loss():
        yy, _ = adv.disc_forward(disc, x)
        return float((yy * seed).sum())

    worst = 0.0
    for li in range(3):
        for _ in range(8):
            i = int(rng.integers(disc.weights[li].shape[0]))
            j = int(rng.integers(disc.weights[li].shape[1]))
            disc.weights[li][i, j] += h
            lp = loss()
            disc.weights[li][i, j] -= 2 * h
            lm = loss()
            disc.weights[li][i, j] += h
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - wg[li][i, j]) / max(abs(fd), 1e-8))
    assert worst < 1e-5
    # input gradient via fd
    for _ in range(10):
        b = int(rng.integers(3))
        k = int(rng.integers(x.shape[1]))
        x[b, k] += h
        lp = loss()
        x[b, k] -= 2 * h
        lm = loss()
        x[b, k] += h
        fd = (lp - lm) / (2 * h)
        assert abs(fd - gx[b, k]) < 1e-5 * max(abs(fd), 1.0)


def test_gan_losses_zero_discriminator_closed_form():
    disc = adv.init_discriminator(8, seed=7)
    for w in disc.weights:
        w[:] = 0.0
    res = adv.gan_losses(disc, _toy_patch(0.3), _toy_patch(0.7, provenance="rendered"),
                         lambda_r1=10.0)
    assert abs(res.l_adv_dis - 2.0 * np.log(2.0)) < 1e-12
    assert res.r1 == 0.0
    assert abs(res.l_dis - 2.0 * np.log(2.0)) < 1e-12
    assert abs(res.l_gen - np.log(2.0)) < 1e-12


def test_r1_weight_gradients_match_fd():
    rng = np.random.default_rng(8)
    disc = adv.init_discriminator(6, seed=9)
    x = rng.normal(size=(2, 6 * 6 * 3))

    def r1_value():
        _, tape = adv.disc_forward(disc, x)
        r1, _, _ = adv.r1_terms(disc, tape)
        return r1

    _, tape = adv.disc_forward(disc, x)
    r1, wg, bg = adv.r1_terms(disc, tape)
    gx = adv.disc_input_grad(disc, tape)
    assert abs(r1 - (gx ** 2).sum() / 2) < 1e-12
    for b in bg:
        assert np.abs(b).max() == 0.0
    h = 1e-5
    worst = 0.0
    for li in range(3):
        for _ in range(10):
            i = int(rng.integers(disc.weights[li].shape[0]))
            j = int(rng.integers(disc.weights[li].shape[1]))
            disc.weights[li][i, j] += h
            lp = r1_value()
            disc.weights[li][i, j] -= 2 * h
            lm = r1_value()
            disc.weights[li][i, j] += h
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - wg[li][i, j]) / max(abs(fd), abs(wg[li][i, j]), 1e-6))
    assert worst < 1e-3     # exact up to activation-boundary crossings


def test_gan_gradients_match_fd():
    rng = np.random.default_rng(10)
    disc = adv.init_discriminator(6, seed=11)
    real = _toy_patch(0.4, size=6)
    fake = _toy_patch(0.6, size=6, provenance="rendered")
    res = adv.gan_losses(disc, real, fake, lambda_r1=3.0)
    h = 1e-6

    def l_dis():
        r = adv.gan_losses(disc, real, fake, lambda_r1=3.0)
        return r.l_dis

    worst = 0.0
    for li in range(3):
        for _ in range(6):
            i = int(rng.integers(disc.weights[li].shape[0]))
            j = int(rng.integers(disc.weights[li].shape[1]))
            disc.weights[li][i, j] += h
            lp = l_dis()
            disc.weights[li][i, j] -= 2 * h
            lm = l_dis()
            disc.weights[li][i, j] += h
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - res.disc_wgrads[li][i, j])
                        / max(abs(fd), abs(res.disc_wgrads[li][i, j]), 1e-6))
    assert worst < 1e-3
    # generator pixel gradient
    fx = fake.pixels.copy()
    d_pix = res.d_fake_pixels[0]
    for _ in range(6):
        iy, ix, c = (int(rng.integers(6)), int(rng.integers(6)), int(rng.integers(3)))
        fake.pixels[iy, ix, c] += h
        lp = adv.gan_losses(disc, real, fake, lambda_r1=3.0).l_gen
        fake.pixels[iy, ix, c] -= 2 * h
        lm = adv.gan_losses(disc, real, fake, lambda_r1=3.0).l_gen
        fake.pixels[iy, ix, c] = fx[iy, ix, c]
        fd = (lp - lm) / (2 * h)
        assert abs(fd - d_pix[iy, ix, c]) < 1e-4 * max(abs(fd), 1.0)


def test_gan_losses_shape_and_kind_validation():
    disc = adv.init_discriminator(8, seed=12)
    with pytest.raises(adv.RenderError):
        adv.gan_losses(disc, _toy_patch(0.5, size=8),
                       _toy_patch(0.5, size=4, provenance="rendered"), 10.0)
    with pytest.raises(adv.RenderError):
        adv.gan_losses(disc, _toy_patch(0.5, size=8),
                       _toy_patch(0.5, size=8, kind="normal"), 10.0)


def test_discriminator_separates_toy_patches():
    # 500 steps on constant 0.2 vs 0.8 patches -> >= 95% accuracy
    rng = np.random.default_rng(13)
    disc = adv.init_discriminator(8, seed=14)
    state = AdamState.for_params(disc.params())
    for _ in range(500):
        real = _toy_patch(0.2 + 0.01 * rng.normal())
        fake = _toy_patch(0.8 + 0.01 * rng.normal(), provenance="rendered")
        res = adv.gan_losses(disc, real, fake, lambda_r1=1.0)
        new_p, state = adam_step(disc.params(), res.disc_wgrads + res.disc_bgrads,
                                 state, lr=1e-3)
        disc.set_params(new_p)
    correct = 0
    for i in range(100):
        real = _toy_patch(0.2 + 0.01 * rng.normal())
        fake = _toy_patch(0.8 + 0.01 * rng.normal(), provenance="rendered")
        yr, _ = adv.disc_forward(disc, real.flat())
        yf, _ = adv.disc_forward(disc, fake.flat())
        correct += int(yr[0] > 0) + int(yf[0] < 0)
    assert correct >= 190


def test_lambda_r1_default_is_ten():
    from cbav.training import TrainConfig
    assert TrainConfig().lambda_r1 == 10.0
