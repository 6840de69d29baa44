"""Synthesis and segmentation networks, their losses, and checkpoint I/O."""

from .api import (
    LatentCode,
    ProbabilityMap,
    SegmentationModel,
    SynthesisModel,
    decode,
    discriminator_loss,
    discriminator_step,
    encode,
    heatmap_to_segmentation,
    kl_divergence,
    segment,
    segmentation_loss,
    synthesis_loss,
    synthesize,
    volume_features,
)
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .networks import FeatureStack, NetworkConfig, feature_stack

__all__ = [
    "FeatureStack", "LatentCode", "NetworkConfig", "ProbabilityMap", "SegmentationModel",
    "SynthesisModel", "decode", "discriminator_loss", "discriminator_step", "encode",
    "feature_stack", "heatmap_to_segmentation", "kl_divergence", "load_checkpoint",
    "read_manifest", "save_checkpoint", "segment", "segmentation_loss", "synthesis_loss",
    "synthesize", "volume_features",
]
