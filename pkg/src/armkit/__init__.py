"""Activation redistribution toolkit.

A small deterministic transformer with an MLP activation hook, the
activation redistribution module (ARM), a filler-token insertion emulator,
distribution analytics and numeric checks of the variance argument behind
them.
"""

__version__ = "0.1.0"

from .arm import ArmConfig, ArmHook, ArmReport, apply
from .model import HookSpec, ModelConfig, ModelWeights, decode, forward, init_weights
from .tensor import RngStream

__all__ = [
    "ArmConfig",
    "ArmHook",
    "ArmReport",
    "HookSpec",
    "ModelConfig",
    "ModelWeights",
    "RngStream",
    "apply",
    "decode",
    "forward",
    "init_weights",
]
