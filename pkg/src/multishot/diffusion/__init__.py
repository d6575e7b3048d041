from .schedule import NoiseSchedule, forward_diffuse
from .tokens import (
    SEG_CHUNK,
    SEG_SHOT,
    SEG_TEMPORAL,
    SEG_TEXT,
    TokenSequence,
    build_sequence,
    chunk_to_tokens,
    patchify,
    tokens_to_chunk,
    unpatchify,
)
from .model import DenoiserModel, NonFiniteActivation, NonFiniteGradient, denoise
from .checkpoint import load_checkpoint, save_checkpoint
from .sampler import sample_chunk
from .training import AugConfig, DivergenceDetected, loss_and_gradients, train

__all__ = [
    "NoiseSchedule", "forward_diffuse", "TokenSequence", "build_sequence",
    "patchify", "unpatchify", "chunk_to_tokens", "tokens_to_chunk",
    "SEG_TEXT", "SEG_SHOT", "SEG_TEMPORAL", "SEG_CHUNK",
    "DenoiserModel", "denoise", "NonFiniteActivation", "NonFiniteGradient",
    "save_checkpoint", "load_checkpoint", "sample_chunk",
    "AugConfig", "DivergenceDetected", "loss_and_gradients", "train",
]
