"""Pose-driven human image animation with a video diffusion model, at toy scale.

A temporal UNet denoiser is conditioned on a reference image through an
appearance encoder (hybrid spatial attention) and on per-frame part maps
through a zero-initialized pose conditioner. Long videos are produced by
averaging noise predictions of overlapping windows at every step.
"""

from animlab.backbone import BackboneConfig, UNet
from animlab.config import RunConfig, parse_config
from animlab.diffusion import AnimationModel, sample_segment
from animlab.errors import (
    CheckpointError,
    CheckpointMismatchError,
    CheckpointNotFoundError,
    ConfigError,
    CorruptCheckpointError,
)
from animlab.fusion import FusionConfig, animate_independent, animate_long, plan_segments
from animlab.schedule import make_noise_schedule

__version__ = "0.1.0"

__all__ = [
    "AnimationModel",
    "BackboneConfig",
    "CheckpointError",
    "CheckpointMismatchError",
    "CheckpointNotFoundError",
    "ConfigError",
    "CorruptCheckpointError",
    "FusionConfig",
    "RunConfig",
    "UNet",
    "animate_independent",
    "animate_long",
    "make_noise_schedule",
    "parse_config",
    "plan_segments",
    "sample_segment",
]
