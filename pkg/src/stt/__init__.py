"""Super Token Transformer: a NumPy implementation with hand-derived gradients."""
from .config import ModelConfig, PRESETS, ConfigError, preset
from .model import (AttentionTrace, ParameterStore, TokenState, forward, init_parameters, loss_and_grads,
                    parameter_count)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "PRESETS", "ConfigError", "preset",
    "AttentionTrace", "ParameterStore", "TokenState", "forward", "init_parameters", "loss_and_grads",
    "parameter_count",
]
