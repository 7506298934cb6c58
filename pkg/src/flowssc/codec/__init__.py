"""Voxel-grid autoencoders with triplane latents."""

from .loss import LossWeights, codec_loss, geo_scal_loss, geo_scal_terms, sem_scal_loss, sem_scal_terms
from .model import (
    CodecConfig,
    ConvEncoder,
    CrossAttentionEncoder,
    TokenSet,
    TriplaneCodec,
    TriplaneDecoder,
    grid_tokens,
    voxel_centers,
    voxelize_tokens,
)

__all__ = [
    "CodecConfig", "ConvEncoder", "CrossAttentionEncoder", "LossWeights", "TokenSet", "TriplaneCodec",
    "TriplaneDecoder", "codec_loss", "geo_scal_loss", "geo_scal_terms", "grid_tokens", "sem_scal_loss",
    "sem_scal_terms", "voxel_centers", "voxelize_tokens",
]
