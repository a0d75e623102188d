"""Command-line surface, run configuration, and checkpoint persistence."""

from .checkpoint import (AvatarFile, CheckpointError, TemplateMismatch,
                         checkpoint_bytes, load_avatar, load_checkpoint,
                         save_avatar, save_checkpoint)
from .config import (ConfigError, FitConfig, RenderConfig, RunConfig,
                     TemplateConfig, build_template, config_from_dict,
                     default_config, load_config)
from .main import main

__all__ = [
    "AvatarFile", "CheckpointError", "TemplateMismatch", "checkpoint_bytes",
    "load_avatar", "load_checkpoint", "save_avatar", "save_checkpoint",
    "ConfigError", "FitConfig", "RenderConfig", "RunConfig", "TemplateConfig",
    "build_template", "config_from_dict", "default_config", "load_config",
    "main",
]
