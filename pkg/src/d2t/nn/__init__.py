from .autograd import NoRecordedGraphError, backward
from .checkpoint import NamedTensorStore
from .layers import (
    Activation,
    CausalSelfAttention,
    Conv1d,
    Dense,
    Embedding,
    GroupNorm,
    LayerNorm,
    LayerShapeError,
    LayerSpec,
    build_layer,
    layer_forward,
    stable_softmax,
)
from .optim import AdamW, AdamWState, adamw_step

__all__ = [
    "Activation",
    "AdamW",
    "AdamWState",
    "CausalSelfAttention",
    "Conv1d",
    "Dense",
    "Embedding",
    "GroupNorm",
    "LayerNorm",
    "LayerShapeError",
    "LayerSpec",
    "NamedTensorStore",
    "NoRecordedGraphError",
    "adamw_step",
    "backward",
    "build_layer",
    "layer_forward",
    "stable_softmax",
]
