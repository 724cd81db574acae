from .model import (
    ChannelDiffusion,
    GuidanceConfig,
    SamplerDivergedError,
    dm_loss,
    dm_train_step,
    guided_noise,
    predict_noise,
    reverse_sample,
)
from .schedule import DiffusionSchedule, build_schedule, forward_noise_closed, forward_noise_step, noise_step
from .unet import ConditionalUNet1d, UNetConfig, sinusoidal_embedding
from .vectorize import channel_to_vector, vector_to_channel

__all__ = [
    "ChannelDiffusion",
    "ConditionalUNet1d",
    "DiffusionSchedule",
    "GuidanceConfig",
    "SamplerDivergedError",
    "UNetConfig",
    "build_schedule",
    "channel_to_vector",
    "dm_loss",
    "dm_train_step",
    "forward_noise_closed",
    "forward_noise_step",
    "guided_noise",
    "noise_step",
    "predict_noise",
    "reverse_sample",
    "sinusoidal_embedding",
    "vector_to_channel",
]
