"""Per-vertex feature codebooks, multi-subject dictionaries, PCA sampling.

A codebook stores one subject's features on the template vertices: the
first F columns condition the distance decoder (geometry), the last F the
color decoder (texture). A dictionary stacks the flattened per-kind rows of
all training subjects; drawing new subjects samples PCA coefficients of the
dictionary rows from a fitted normal distribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

INIT_STD = 0.01  # feature initialization scale; keeps early predictions near the decoder bias

_KINDS = ("geometry", "texture")


class CodebookError(ValueError):
    pass


@dataclass(eq=False)
class Codebook:
    """(M, 2F) feature table; geometry columns first, texture columns last."""

    features: np.ndarray
    feature_dim: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != 2 * self.feature_dim:
            raise CodebookError(f"features shape {self.features.shape} does not "
                                f"match feature_dim {self.feature_dim}")

    @property
    def num_vertices(self) -> int:
        return self.features.shape[0]

    @property
    def geometry(self) -> np.ndarray:
        return self.features[:, :self.feature_dim]

    @property
    def texture(self) -> np.ndarray:
        return self.features[:, self.feature_dim:]

    def copy(self) -> "Codebook":
        return Codebook(self.features.copy(), self.feature_dim)


@dataclass(eq=False)
class Dictionary:
    """(N, M*F) stack of flattened per-subject feature tables of one kind."""

    entries: np.ndarray
    kind: str

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise CodebookError("dictionary must be a non-empty 2-D array")
        if self.kind not in ("shape", "color"):
            raise CodebookError(f"unknown dictionary kind {self.kind!r}")

    @property
    def num_subjects(self) -> int:
        return self.entries.shape[0]

    @property
    def row_length(self) -> int:
        return self.entries.shape[1]


def dictionary_row_length(mesh_m: int, f: int) -> int:
    return mesh_m * f

def subject_nbytes(mesh_m: int, f: int, itemsize: int = 4) -> int:
    """Storage for one subject in ONE dictionary kind."""
    return mesh_m * f * itemsize


def init_dictionary(n: int, mesh_m: int, f: int, seed: int, kind: str = "shape") -> Dictionary:
    """I.i.d. zero-mean normal entries with std INIT_STD, reproducible."""
    if n < 1 or mesh_m < 1 or f < 1:
        raise CodebookError("dictionary sizes must be >= 1")
    rng = np.random.default_rng(seed)
    return Dictionary(rng.normal(0.0, INIT_STD, size=(n, mesh_m * f)), kind)


def subject_codebook(dict_s: Dictionary, dict_c: Dictionary, index: int,
                     mesh_m: int, f: int) -> Codebook:
    """Assemble the (M, 2F) codebook of one subject from both dictionaries."""
    if not (0 <= index < dict_s.num_subjects):
        raise CodebookError(f"subject index {index} out of range")
    geo = dict_s.entries[index].reshape(mesh_m, f)
    tex = dict_c.entries[index].reshape(mesh_m, f)
    return Codebook(np.concatenate([geo, tex], axis=1), f)


def codebook_from_rows(row_s: np.ndarray, row_c: np.ndarray, mesh_m: int, f: int) -> Codebook:
    return Codebook(np.concatenate([row_s.reshape(mesh_m, f),
                                    row_c.reshape(mesh_m, f)], axis=1), f)


# ---------------------------------------------------------------------------
# feature fusion
# ---------------------------------------------------------------------------

def lookup_fused_batch(cb: Codebook, mesh_faces: np.ndarray,
                       faces: np.ndarray, bary3: np.ndarray):
    """Barycentric fusion of the three supporting vertex rows.

    bary3 = (u, v, w) weights corners (m0, m1, m2). Returns (f_s, f_c),
    each (B, F).
    """
    if faces.min() < 0 or faces.max() >= mesh_faces.shape[0]:
        raise CodebookError("face index out of range")
    tri = mesh_faces[faces]                       # (B, 3)
    rows = cb.features[tri]                       # (B, 3, 2F)
    fused = np.einsum("bk,bkf->bf", bary3, rows)  # (B, 2F)
    return fused[:, :cb.feature_dim], fused[:, cb.feature_dim:]


def lookup_fused(cb: Codebook, mesh_faces: np.ndarray, query):
    """Single-query fusion; query carries (face, uvd)."""
    u, v = query.uvd[0], query.uvd[1]
    bary3 = np.array([[u, v, 1.0 - u - v]])
    f_s, f_c = lookup_fused_batch(cb, mesh_faces, np.array([query.face]), bary3)
    return f_s[0], f_c[0]


def swap_rows(dst: Codebook, src: Codebook, vertex_set, kinds) -> Codebook:
    """Replace dst rows at vertex_set by src rows for the selected kinds.

    Returns a new codebook; all untouched entries are bit-identical to dst.
    """
    if dst.features.shape != src.features.shape or dst.feature_dim != src.feature_dim:
        raise CodebookError("codebook shapes do not match")
    kinds = tuple(kinds)
    for k in kinds:
        if k not in _KINDS:
            raise CodebookError(f"unknown kind {k!r}")
    idx = np.asarray(list(vertex_set), dtype=np.int64)
    out = dst.copy()
    if idx.size == 0:
        return out
    if idx.min() < 0 or idx.max() >= dst.num_vertices:
        raise CodebookError("vertex index out of range")
    f = dst.feature_dim
    if "geometry" in kinds:
        out.features[idx, :f] = src.features[idx, :f]
    if "texture" in kinds:
        out.features[idx, f:] = src.features[idx, f:]
    return out


# ---------------------------------------------------------------------------
# generative PCA sampling
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PcaModel:
    """Affine PCA subspace of dictionary rows plus a normal coefficient model."""

    mean: np.ndarray        # (MF,)
    eigvecs: np.ndarray     # (D, MF) orthonormal rows
    coeff_mean: np.ndarray  # (D,)
    coeff_cov: np.ndarray   # (D, D)

    @property
    def dim(self) -> int:
        return self.eigvecs.shape[0]


def pca_fit(dictionary: Dictionary, d: int) -> PcaModel:
    """PCA of the dictionary rows via SVD of the centered matrix.

    d is clamped to N-1 (with a warning) since N-1 directions at most carry
    variance; the coefficient normal distribution is fitted to the N
    projected rows.
    """
    n = dictionary.num_subjects
    if n < 2:
        raise CodebookError("PCA needs at least 2 dictionary rows")
    if d < 1:
        raise CodebookError("PCA dimension must be >= 1")
    d_max = min(n - 1, dictionary.row_length)
    if d > d_max:
        warnings.warn(f"PCA dimension {d} clamped to {d_max} (N={n})")
        d = d_max
    mean = dictionary.entries.mean(axis=0)
    centered = dictionary.entries - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    eigvecs = vt[:d].copy()
    coeffs = centered @ eigvecs.T
    coeff_mean = coeffs.mean(axis=0)
    dc = coeffs - coeff_mean
    coeff_cov = dc.T @ dc / (n - 1)
    return PcaModel(mean, eigvecs, coeff_mean, coeff_cov)


def pca_project(model: PcaModel, row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.shape[0] != model.mean.shape[0]:
        raise CodebookError("row length does not match the PCA model")
    return model.eigvecs @ (row - model.mean)


def pca_reconstruct(model: PcaModel, coeffs: np.ndarray) -> np.ndarray:
    return model.mean + np.asarray(coeffs, dtype=np.float64) @ model.eigvecs


def _coeff_cholesky(model: PcaModel) -> np.ndarray:
    trace = float(np.trace(model.coeff_cov))
    if trace <= 0.0:
        return np.zeros_like(model.coeff_cov)
    reg = 1e-8 * trace / model.dim
    try:
        return np.linalg.cholesky(model.coeff_cov + reg * np.eye(model.dim))
    except np.linalg.LinAlgError as e:
        raise CodebookError("coefficient covariance is not PSD after regularization") from e


def pca_sample_coeffs(model: PcaModel, rng: np.random.Generator) -> np.ndarray:
    """Draw coefficients from the fitted normal (Cholesky of the regularized
    covariance; degenerate directions sample near-deterministically)."""
    z = rng.standard_normal(model.dim)
    return model.coeff_mean + _coeff_cholesky(model) @ z


def pca_sample(model: PcaModel, rng_seed) -> np.ndarray:
    """Sample a new dictionary-kind row: mean + k @ eigvecs."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    return pca_reconstruct(model, pca_sample_coeffs(model, rng))
