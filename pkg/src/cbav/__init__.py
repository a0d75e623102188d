"""Locally editable avatars: mesh-anchored feature codebooks with local
neural field decoders, generative PCA sampling, and auto-decoder training.

Library layout:
    geometry     template meshes, skinning, closest-point queries, rasterizer
    codebook     per-subject features, dictionaries, PCA sampling
    field        positional encoding, decoders, reverse-mode gradients
    training     synthetic scans, losses, Adam, the training loop
    adversarial  implicit patch rendering, discriminators, GAN losses
    avatar       fitting, editing, painting, reposing
    mesher       marching cubes, export, turntables
    metrics      Chamfer / normal consistency / f-score
    cli          command line, TOML config, checkpoints
"""

from . import (adversarial, avatar, codebook, field, geometry, mesher,
               metrics, templates, training)
from .avatar import (Avatar, extract_mesh, field_closures, fit_codebook,
                     init_avatar_from_index, init_avatar_from_sample,
                     paint_texture, repose, transfer_region)
from .codebook import Codebook, Dictionary, PcaModel
from .field import DecoderWeights, encode, eval_color, eval_sdf, query_field
from .geometry import Camera, PoseParams, TemplateMesh, make_icosphere, skin
from .templates import make_humanoid
from .training import Scan, TrainConfig, sample_points, synth_scan, train

__version__ = "0.1.0"

__all__ = [
    "adversarial", "avatar", "codebook", "field", "geometry", "mesher",
    "metrics", "templates", "training",
    "Avatar", "extract_mesh", "field_closures", "fit_codebook",
    "init_avatar_from_index", "init_avatar_from_sample", "paint_texture",
    "repose", "transfer_region",
    "Codebook", "Dictionary", "PcaModel",
    "DecoderWeights", "encode", "eval_color", "eval_sdf", "query_field",
    "Camera", "PoseParams", "TemplateMesh", "make_icosphere", "skin",
    "make_humanoid",
    "Scan", "TrainConfig", "sample_points", "synth_scan", "train",
    "__version__",
]
