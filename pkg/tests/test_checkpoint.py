import numpy as np
import pytest

from cbav.avatar import Avatar
from cbav.cli.checkpoint import (CheckpointError, TemplateMismatch,
                                 checkpoint_bytes, load_avatar,
                                 load_checkpoint, save_avatar, save_checkpoint)
from cbav.codebook import Codebook
from cbav.geometry import PoseParams, make_icosphere, template_hash
from cbav.training import TrainConfig, init_train_state


@pytest.fixture(scope="module")
def small_state():
    tpl = make_icosphere(1)
    cfg = TrainConfig(feature_dim=4, points_per_iter=16, batch_subjects=1, epochs=1)
    state = init_train_state(tpl, 3, cfg)
    state.iteration = 42
    state.rng.standard_normal(10)   # advance the stream
    return tpl, state


def test_checkpoint_roundtrip_byte_identical(tmp_path, small_state):
    tpl, state = small_state
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(p1, state, tpl)
    loaded, h1 = load_checkpoint(p1, tpl)
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p2, loaded, tpl)
    assert p1.read_bytes() == p2.read_bytes()

    assert loaded.iteration == 42
    assert np.array_equal(loaded.dict_s.entries, state.dict_s.entries)
    assert np.array_equal(loaded.dict_c.entries, state.dict_c.entries)
    for a, b in zip(loaded.phi.params(), state.phi.params()):
        assert np.array_equal(a, b)
    assert loaded.phi.out_activation == "none"
    assert loaded.psi.out_activation == "sigmoid"
    # optimizer state and rng stream restored exactly
    assert loaded.adam["phi"].t == state.adam["phi"].t
    assert loaded.rng.standard_normal(4).tolist() == state.rng.standard_normal(4).tolist()


def test_checkpoint_template_mismatch(tmp_path, small_state):
    tpl, state = small_state
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, state, tpl)
    other = make_icosphere(2)
    with pytest.raises(TemplateMismatch):
        load_checkpoint(p, other)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_with_discriminators(tmp_path):
    tpl = make_icosphere(1)
    cfg = TrainConfig(feature_dim=4, points_per_iter=16, batch_subjects=1,
                      epochs=1, adversarial=True, patch_size=8)
    state = init_train_state(tpl, 2, cfg)
    p = tmp_path / "adv.ckpt"
    save_checkpoint(p, state, tpl)
    loaded, _ = load_checkpoint(p, tpl)
    assert loaded.disc_color is not None
    for a, b in zip(loaded.disc_color.params(), state.disc_color.params()):
        assert np.array_equal(a, b)
    assert "disc_color" in loaded.adam


def test_avatar_file_roundtrip(tmp_path):
    tpl = make_icosphere(1, rig=True)
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(tpl.num_vertices, 8)), 4)
    pose = PoseParams(np.array([[0.1, 0.2, 0.3]]), np.zeros(0), np.array([1.0, 2, 3]))
    avatar = Avatar(cb, pose, tpl, provenance="dictionary:1")
    ck_hash = b"\x07" * 32
    p = tmp_path / "a.avatar"
    save_avatar(p, avatar, ck_hash)
    back = load_avatar(p, tpl, ck_hash)
    assert np.array_equal(back.avatar.codebook.features, cb.features)
    assert np.array_equal(back.avatar.pose.joint_rotations, pose.joint_rotations)
    assert np.array_equal(back.avatar.pose.root_translation, pose.root_translation)
    assert back.avatar.provenance == "dictionary:1"
    assert back.checkpoint_hash == ck_hash

    with pytest.raises(TemplateMismatch):
        load_avatar(p, tpl, b"\x08" * 32)
    other = make_icosphere(2)
    with pytest.raises(TemplateMismatch):
        load_avatar(p, other, ck_hash)


def test_checkpoint_bytes_deterministic(small_state):
    tpl, state = small_state
    h = template_hash(tpl)
    assert checkpoint_bytes(state, h) == checkpoint_bytes(state, h)
