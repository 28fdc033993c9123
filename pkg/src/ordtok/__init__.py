"""Ordered, prefix-decodable discrete image tokens.

An encoder maps a latent image grid to K ordered register tokens through
finite scalar quantization; a rectified-flow decoder reconstructs the
image from any prefix of that sequence; an autoregressive transformer
generates new sequences class-conditionally. Shorter prefixes give
coarser reconstructions, longer ones add detail, and the first k tokens
of a long encoding are exactly the k-token encoding.
"""

from .ar import ArConfig, ARModel, GenerationRequest, generate
from .codec import ConvAE, IdentityPatch, TrainedAE
from .encoder import EncoderConfig, RegisterEncoder
from .errors import CheckpointError, NumericError, ShapeError, ValidationError
from .flow import FlowDecoder, GuidanceParams, decode, integrate_flow
from .fsq import FsqLevels
from .repa import FrozenRandomProjection, PrecomputedFeatures, RepaProjector
from .schedule import DropoutSchedule, apply_mask, sample_keep
from .tokenizer import TokenizerModel
from .train import (OptimSettings, Stage1Settings, Stage2Settings,
                    load_checkpoint, save_checkpoint, train_ar, train_tokenizer)

__version__ = "0.1.0"

__all__ = [
    "ArConfig", "ARModel", "GenerationRequest", "generate",
    "ConvAE", "IdentityPatch", "TrainedAE",
    "EncoderConfig", "RegisterEncoder",
    "CheckpointError", "NumericError", "ShapeError", "ValidationError",
    "FlowDecoder", "GuidanceParams", "decode", "integrate_flow",
    "FsqLevels",
    "FrozenRandomProjection", "PrecomputedFeatures", "RepaProjector",
    "DropoutSchedule", "apply_mask", "sample_keep",
    "TokenizerModel",
    "OptimSettings", "Stage1Settings", "Stage2Settings",
    "load_checkpoint", "save_checkpoint", "train_ar", "train_tokenizer",
    "__version__",
]
