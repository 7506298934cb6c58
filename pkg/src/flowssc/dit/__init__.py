"""Diffusion transformer over triplane tokens."""

from .model import (
    DiT,
    DiTBlock,
    DiTConfig,
    ComposedLayout,
    TimeStepEmbedding,
    adaln_modulate,
    masked_mean_square,
    param_count,
    patchify,
    unpatchify,
    valid_mask,
)

__all__ = [
    "ComposedLayout", "DiT", "DiTBlock", "DiTConfig", "TimeStepEmbedding", "adaln_modulate",
    "masked_mean_square", "param_count", "patchify", "unpatchify", "valid_mask",
]
