"""Versioned binary persistence: training checkpoints and avatar files.

Checkpoints open with the magic "CBAV" and hold tagged sections in a fixed
order; every numeric payload is little-endian float64 (counters are
little-endian unsigned integers). Loading then saving reproduces the file
byte for byte. Avatars are small standalone files that reference their
checkpoint by content hash, so editing never rewrites the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..avatar import Avatar
from ..codebook import Dictionary
from ..field import DecoderWeights
from ..geometry.mesh import TemplateMesh, template_hash
from ..geometry.skinning import PoseParams
from ..training import AdamState, TrainState

MAGIC = b"CBAV"
VERSION = 1
AVATAR_MAGIC = b"CBAVAVT\x00"

_ADAM_ORDER = ["dict_s", "dict_c", "phi", "psi", "disc_color", "disc_normal"]


class CheckpointError(ValueError):
    pass


class TemplateMismatch(CheckpointError):
    """The checkpoint was trained against a different template."""


# -- primitive encoding ------------------------------------------------------

def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _unpack_array(buf: bytes, off: int) -> Tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    return a, off + 8 * n


def _pack_array_list(arrays: List[np.ndarray]) -> bytes:
    out = struct.pack("<I", len(arrays))
    for a in arrays:
        out += _pack_array(a)
    return out


def _unpack_array_list(buf: bytes, off: int = 0) -> Tuple[List[np.ndarray], int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = []
    for _ in range(n):
        a, off = _unpack_array(buf, off)
        arrays.append(a)
    return arrays, off


def _pack_decoder(dec) -> bytes:
    act = {"none": 0, "sigmoid": 1}.get(getattr(dec, "out_activation", "none"), 0)
    return struct.pack("<B", act) + _pack_array_list(dec.params())


def _unpack_decoder(buf: bytes, cls=DecoderWeights):
    (act,) = struct.unpack_from("<B", buf, 0)
    params, _ = _unpack_array_list(buf, 1)
    k = len(params) // 2
    if cls is DecoderWeights:
        return DecoderWeights(params[:k], params[k:],
                              {0: "none", 1: "sigmoid"}[act])
    dec = cls(params[:k], params[k:])
    return dec


def _pack_adam(states: dict) -> bytes:
    keys = [k for k in _ADAM_ORDER if k in states]
    out = struct.pack("<I", len(keys))
    for k in keys:
        st = states[k]
        name = k.encode("ascii")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<Q", st.t)
        out += _pack_array_list(st.m)
        out += _pack_array_list(st.v)
    return out


def _unpack_adam(buf: bytes) -> dict:
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    states = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("ascii")
        off += ln
        (t,) = struct.unpack_from("<Q", buf, off)
        off += 8
        m, off = _unpack_array_list(buf, off)
        v, off = _unpack_array_list(buf, off)
        states[name] = AdamState(int(t), m, v)
    return states


def _pack_rng(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("ascii")


def _unpack_rng(buf: bytes) -> np.random.Generator:
    state = json.loads(buf.decode("ascii"))
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


def _sections(payloads: List[Tuple[str, bytes]]) -> bytes:
    out = b""
    for tag, body in payloads:
        t = tag.encode("ascii")
        if len(t) > 8:
            raise CheckpointError(f"tag too long: {tag}")
        out += t.ljust(8, b" ") + struct.pack("<Q", len(body)) + body
    return out


def _parse_sections(buf: bytes) -> dict:
    off = 0
    out = {}
    while off < len(buf):
        tag = buf[off:off + 8].decode("ascii").rstrip()
        (ln,) = struct.unpack_from("<Q", buf, off + 8)
        off += 16
        out[tag] = buf[off:off + ln]
        off += ln
    return out


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(state: TrainState, tpl_hash: bytes) -> bytes:
    f = state.feature_dim
    m = state.dict_s.row_length // f
    n = state.dict_s.num_subjects
    counts = struct.pack("<IIIQ", f, m, n, state.iteration)
    payloads = [
        ("tplhash", tpl_hash),
        ("counts", counts),
        ("dict_s", _pack_array(state.dict_s.entries)),
        ("dict_c", _pack_array(state.dict_c.entries)),
        ("phi", _pack_decoder(state.phi)),
        ("psi", _pack_decoder(state.psi)),
        ("adam", _pack_adam(state.adam)),
        ("rng", _pack_rng(state.rng)),
    ]
    if state.disc_color is not None:
        payloads.append(("disc_c", _pack_decoder(state.disc_color)))
        payloads.append(("disc_n", _pack_decoder(state.disc_normal)))
    return MAGIC + struct.pack("<I", VERSION) + _sections(payloads)


def save_checkpoint(path, state: TrainState, template: TemplateMesh) -> bytes:
    """Write the checkpoint; returns its content hash."""
    data = checkpoint_bytes(state, template_hash(template))
    Path(path).write_bytes(data)
    return hashlib.sha256(data).digest()


def load_checkpoint(path, template: Optional[TemplateMesh] = None) -> Tuple[TrainState, bytes]:
    """Read a checkpoint; verifies the template hash when one is supplied.

    Returns (state, file content hash).
    """
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (ver,) = struct.unpack_from("<I", data, 4)
    if ver != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ver}")
    sec = _parse_sections(data[8:])
    tpl_hash = sec["tplhash"]
    if template is not None and template_hash(template) != tpl_hash:
        raise TemplateMismatch("checkpoint template hash does not match the "
                               "supplied template")
    f, m, n, iteration = struct.unpack("<IIIQ", sec["counts"])
    ds, _ = _unpack_array(sec["dict_s"], 0)
    dc, _ = _unpack_array(sec["dict_c"], 0)
    state = TrainState(
        dict_s=Dictionary(ds, "shape"),
        dict_c=Dictionary(dc, "color"),
        phi=_unpack_decoder(sec["phi"]),
        psi=_unpack_decoder(sec["psi"]),
        adam=_unpack_adam(sec["adam"]),
        rng=_unpack_rng(sec["rng"]),
        iteration=int(iteration),
    )
    if "disc_c" in sec:
        from ..adversarial import DiscriminatorWeights
        state.disc_color = _unpack_decoder(sec["disc_c"], DiscriminatorWeights)
        state.disc_normal = _unpack_decoder(sec["disc_n"], DiscriminatorWeights)
    if state.feature_dim != f or state.dict_s.num_subjects != n \
            or state.dict_s.row_length != m * f:
        raise CheckpointError("checkpoint counts disagree with payload shapes")
    return state, hashlib.sha256(data).digest()


# -- avatars -----------------------------------------------------------------

@dataclass
class AvatarFile:
    avatar: Avatar
    checkpoint_hash: bytes


def save_avatar(path, avatar: Avatar, checkpoint_hash: bytes) -> None:
    pose = avatar.pose
    body = _sections([
        ("ckpt", checkpoint_hash),
        ("tplhash", template_hash(avatar.template)),
        ("featdim", struct.pack("<I", avatar.codebook.feature_dim)),
        ("codebook", _pack_array(avatar.codebook.features)),
        ("pose", _pack_array_list([pose.joint_rotations, pose.shape_coeffs,
                                   pose.root_translation])),
        ("prov", avatar.provenance.encode("utf-8")),
    ])
    Path(path).write_bytes(AVATAR_MAGIC + body)


def load_avatar(path, template: TemplateMesh,
                checkpoint_hash: Optional[bytes] = None) -> AvatarFile:
    from ..codebook import Codebook

    data = Path(path).read_bytes()
    if not data.startswith(AVATAR_MAGIC):
        raise CheckpointError(f"{path}: not an avatar file")
    sec = _parse_sections(data[len(AVATAR_MAGIC):])
    if template_hash(template) != sec["tplhash"]:
        raise TemplateMismatch("avatar template hash does not match the "
                               "supplied template")
    if checkpoint_hash is not None and sec["ckpt"] != checkpoint_hash:
        raise TemplateMismatch("avatar references a different checkpoint")
    (f,) = struct.unpack("<I", sec["featdim"])
    feats, _ = _unpack_array(sec["codebook"], 0)
    arrays, _ = _unpack_array_list(sec["pose"], 0)
    pose = PoseParams(arrays[0], arrays[1], arrays[2])
    av = Avatar(Codebook(feats, f), pose, template,
                provenance=sec["prov"].decode("utf-8"))
    return AvatarFile(avatar=av, checkpoint_hash=sec["ckpt"])
