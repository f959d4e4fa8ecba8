"""From-scratch numpy neural network: text encoder, volume generator, AdamW."""

from semvox.nn.model import (
    EncoderParams,
    GeneratorParams,
    ModelParams,
    ModelSpec,
    encode,
    generate,
)
from semvox.nn.optim import AdamWConfig, OptimizerState, adamw_update
from semvox.nn.training import TrainConfig, gradient_check, train

__all__ = [
    "AdamWConfig",
    "EncoderParams",
    "GeneratorParams",
    "ModelParams",
    "ModelSpec",
    "OptimizerState",
    "TrainConfig",
    "adamw_update",
    "encode",
    "generate",
    "gradient_check",
    "train",
]
