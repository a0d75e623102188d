"""Local-coordinate neural field: positional encoding, the shared distance
and color decoders, and exact reverse-mode gradients.

The decoders are fixed four-layer, 128-wide rectifier networks evaluated in
float64. Forward passes record a tape (layer inputs + pre-activations) from
which gradients with respect to weights, codebook features, and encoded
inputs are obtained exactly (rectifier subgradient at 0 is 0). There is
deliberately no general autodiff here; the computation graphs are fixed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .codebook import Codebook, lookup_fused_batch
from .geometry.bvh import AccelStructure, accel_of
from .geometry.local import local_coords_batch
from .geometry.mesh import TemplateMesh

N_BANDS = 5
RAW_DIM = 3
PE_DIM = 2 * N_BANDS * RAW_DIM   # 30
DIR_DIM = 3
ENC_DIM = RAW_DIM + PE_DIM + DIR_DIM  # 36
HIDDEN = 128
N_LAYERS = 4


class FieldError(ValueError):
    pass


def encode(uvd, direction) -> np.ndarray:
    """Encoded decoder input: [raw (u,v,d) | sin/cos bands | dir].

    Sinusoidal block is coordinate-major: for each of u, v, d in turn,
    sin(2^l pi x), cos(2^l pi x) for l = 0..4. The direction passes through
    unencoded. Accepts (..., 3) arrays; returns (..., 36).
    """
    x = np.asarray(uvd, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    d = np.atleast_2d(d)
    freqs = (2.0 ** np.arange(N_BANDS)) * np.pi            # (5,)
    ang = x[:, :, None] * freqs[None, None, :]             # (B, 3, 5)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)     # (B, 3, 5, 2)
    out = np.concatenate([x, sc.reshape(x.shape[0], PE_DIM), d], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DecoderWeights:
    """Four affine layers; rectifier between layers; optional logistic output."""

    weights: List[np.ndarray]   # [(in,128), (128,128), (128,128), (128,out)]
    biases: List[np.ndarray]
    out_activation: str         # "none" (distance) | "sigmoid" (color)
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise FieldError(f"decoder must have {N_LAYERS} layers")
        for i in range(1, N_LAYERS):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise FieldError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise FieldError("bias shape mismatch")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.in_dim - ENC_DIM

    def params(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def set_params(self, params: List[np.ndarray]) -> None:
        self.weights = [np.ascontiguousarray(p) for p in params[:N_LAYERS]]
        self.biases = [np.ascontiguousarray(p) for p in params[N_LAYERS:]]
        self.version += 1

    def copy(self) -> "DecoderWeights":
        return DecoderWeights([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases],
                              self.out_activation)


def init_decoder(feature_dim: int, out_dim: int, seed: int,
                 out_activation: str = "none") -> DecoderWeights:
    """He-normal hidden layers, small final layer, zero biases.

    The small final layer keeps the initial field near zero, so the surface
    starts close to the template and the small-norm codebook init."""
    rng = np.random.default_rng(seed)
    dims = [feature_dim + ENC_DIM, HIDDEN, HIDDEN, HIDDEN, out_dim]
    weights, biases = [], []
    for i in range(N_LAYERS):
        scale = np.sqrt(2.0 / dims[i])
        if i == N_LAYERS - 1:
            scale = 1e-2 / np.sqrt(dims[i])
        weights.append(rng.normal(0.0, scale, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    return DecoderWeights(weights, biases, out_activation)


def decoder_hash(dec: DecoderWeights) -> str:
    h = hashlib.sha256()
    for a in dec.params():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class Tape:
    """Recorded activations of one forward pass (replayable bitwise)."""

    decoder: DecoderWeights
    version: int
    layer_inputs: List[np.ndarray]  # A_0..A_3, A_0 is the raw input
    pre_acts: List[np.ndarray]      # Z_1..Z_3 (hidden pre-activations)
    output: np.ndarray              # post-activation output

    @property
    def batch(self) -> int:
        return self.layer_inputs[0].shape[0]


@dataclass
class TapeGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    features: np.ndarray   # (B, F)
    encoded: np.ndarray    # (B, 36)


def forward(dec: DecoderWeights, x: np.ndarray):
    """Batched forward pass; returns (output (B, out), Tape)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != dec.in_dim:
        raise FieldError(f"input width {a.shape[1]} != decoder width {dec.in_dim}")
    inputs = [a]
    pre = []
    for i in range(N_LAYERS - 1):
        z = a @ dec.weights[i] + dec.biases[i]
        pre.append(z)
        a = np.maximum(z, 0.0)
        inputs.append(a)
    out = a @ dec.weights[-1] + dec.biases[-1]
    if dec.out_activation == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-out))
    return out, Tape(dec, dec.version, inputs, pre, out)


def backward(tape: Tape, grad_out: np.ndarray) -> TapeGrads:
    """Exact reverse-mode gradients for one recorded forward pass."""
    dec = tape.decoder
    if tape.version != dec.version:
        raise FieldError("stale tape: decoder weights changed since the forward pass")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != tape.output.shape:
        raise FieldError(f"grad_out shape {g.shape} != output shape {tape.output.shape}")
    if dec.out_activation == "sigmoid":
        y = tape.output
        g = g * y * (1.0 - y)
    wg: List[Optional[np.ndarray]] = [None] * N_LAYERS
    bg: List[Optional[np.ndarray]] = [None] * N_LAYERS
    wg[-1] = tape.layer_inputs[-1].T @ g
    bg[-1] = g.sum(axis=0)
    ga = g @ dec.weights[-1].T
    for i in range(N_LAYERS - 2, -1, -1):
        gz = ga * (tape.pre_acts[i] > 0.0)
        wg[i] = tape.layer_inputs[i].T @ gz
        bg[i] = gz.sum(axis=0)
        ga = gz @ dec.weights[i].T
    f = dec.feature_dim
    return TapeGrads(weights=wg, biases=bg, features=ga[:, :f], encoded=ga[:, f:])


def _eval(dec: DecoderWeights, feats: np.ndarray, enc: np.ndarray):
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    enc = np.atleast_2d(np.asarray(enc, dtype=np.float64))
    return forward(dec, np.concatenate([feats, enc], axis=1))


def eval_sdf_batch(phi: DecoderWeights, feats: np.ndarray, enc: np.ndarray):
    out, tape = _eval(phi, feats, enc)
    return out[:, 0], tape


def eval_sdf(phi: DecoderWeights, f_s: np.ndarray, enc: np.ndarray):
    s, tape = eval_sdf_batch(phi, f_s, enc)
    return float(s[0]), tape


def eval_color_batch(psi: DecoderWeights, feats: np.ndarray, enc: np.ndarray):
    out, tape = _eval(psi, feats, enc)
    return out, tape


def eval_color(psi: DecoderWeights, f_c: np.ndarray, enc: np.ndarray):
    c, tape = eval_color_batch(psi, f_c, enc)
    return c[0], tape


# ---------------------------------------------------------------------------
# full query pipeline: point -> local frame -> fused features -> decoders
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class QueryTape:
    """Everything needed to push output gradients back to the decoders and
    the three supporting codebook rows of each query."""

    faces: np.ndarray       # (B,)
    bary: np.ndarray        # (B, 3)
    uvd: np.ndarray         # (B, 3) local coordinates incl. signed distance
    sdf_tape: Optional[Tape]
    color_tape: Optional[Tape]
    mesh_faces: np.ndarray  # (Mf, 3) template face list
    num_vertices: int
    feature_dim: int


def query_field_batch(accel: AccelStructure, cb: Codebook,
                      phi: Optional[DecoderWeights], psi: Optional[DecoderWeights],
                      points: np.ndarray):
    """Evaluate (s, c) of the field at global points.

    Either decoder may be None to skip that branch. Returns
    (s (B,) | None, c (B,3) | None, QueryTape).
    """
    mesh = accel.mesh
    faces, uvd, _, dir_local = local_coords_batch(accel, points)
    bary3 = np.stack([uvd[:, 0], uvd[:, 1], 1.0 - uvd[:, 0] - uvd[:, 1]], axis=1)
    f_s, f_c = lookup_fused_batch(cb, mesh.faces, faces, bary3)
    enc = encode(uvd, dir_local)
    s = c = None
    sdf_tape = color_tape = None
    if phi is not None:
        s, sdf_tape = eval_sdf_batch(phi, f_s, enc)
    if psi is not None:
        c, color_tape = eval_color_batch(psi, f_c, enc)
    tape = QueryTape(faces=faces, bary=bary3, uvd=uvd, sdf_tape=sdf_tape,
                     color_tape=color_tape, mesh_faces=mesh.faces,
                     num_vertices=mesh.num_vertices, feature_dim=cb.feature_dim)
    return s, c, tape


def query_field(mesh: TemplateMesh, accel: AccelStructure, cb: Codebook,
                phi: DecoderWeights, psi: DecoderWeights, x_g):
    """Single-point field query; returns (s, c, QueryTape)."""
    if accel.mesh is not mesh:
        accel = accel_of(mesh)
    s, c, tape = query_field_batch(accel, cb, phi, psi,
                                   np.asarray(x_g, dtype=np.float64).reshape(1, 3))
    return float(s[0]), c[0], tape


def scatter_feature_grads(tape: QueryTape, dfeat: np.ndarray, kind: str) -> np.ndarray:
    """Distribute per-query fused-feature gradients onto codebook rows.

    Each query touches its face's three vertices with its barycentric
    weights. Returns an (M, 2F) gradient array with only the selected half
    populated.
    """
    grad = np.zeros((tape.num_vertices, 2 * tape.feature_dim))
    tri = tape.mesh_faces[tape.faces]          # (B, 3)
    lo = 0 if kind == "geometry" else tape.feature_dim
    hi = lo + tape.feature_dim
    for k in range(3):
        np.add.at(grad[:, lo:hi], tri[:, k], tape.bary[:, k, None] * dfeat)
    return grad


def backward_query(tape: QueryTape, ds: Optional[np.ndarray],
                   dc: Optional[np.ndarray]):
    """Backpropagate output gradients through a recorded field query.

    Returns (phi TapeGrads | None, psi TapeGrads | None, codebook gradient
    (M, 2F)).
    """
    cb_grad = np.zeros((tape.num_vertices, 2 * tape.feature_dim))
    pg = cg = None
    if ds is not None:
        pg = backward(tape.sdf_tape, np.asarray(ds, dtype=np.float64).reshape(-1, 1))
        cb_grad += scatter_feature_grads(tape, pg.features, "geometry")
    if dc is not None:
        cg = backward(tape.color_tape, dc)
        cb_grad += scatter_feature_grads(tape, cg.features, "texture")
    return pg, cg, cb_grad


def spatial_gradient(field, x, eps: float) -> np.ndarray:
    """Central-difference spatial gradient of a scalar field closure.

    The closure is called once per axis offset (six evaluations); whatever
    tapes the closure records stay alive with it.
    """
    if eps <= 0.0:
        raise FieldError("eps must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(3)
    g = np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        g[k] = (field(x + e) - field(x - e)) / (2.0 * eps)
    return g


def fd_offsets(points: np.ndarray, eps: float) -> np.ndarray:
    """(B, 6, 3) plus/minus axis offsets used for finite-difference normals,
    ordered (+x, -x, +y, -y, +z, -z)."""
    pts = np.atleast_2d(points)
    out = np.repeat(pts[:, None, :], 6, axis=1)
    for k in range(3):
        out[:, 2 * k, k] += eps
        out[:, 2 * k + 1, k] -= eps
    return out


def gradient_from_offsets(s_off: np.ndarray, eps: float) -> np.ndarray:
    """(B, 3) central differences from values at fd_offsets points (B, 6)."""
    return np.stack([(s_off[:, 0] - s_off[:, 1]),
                     (s_off[:, 2] - s_off[:, 3]),
                     (s_off[:, 4] - s_off[:, 5])], axis=1) / (2.0 * eps)
