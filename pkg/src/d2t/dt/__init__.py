from .model import DecisionTransformer, DTConfig
from .train import (
    CachedStates,
    EpisodeRecord,
    angular_mse,
    diffusion_states,
    dt_loss,
    dt_train_step,
    fit_scales,
    make_batch,
    perfect_csi,
    predict_action,
    rollout,
    sample_batch,
    wrapped_angle_error,
)
from .trajectory import Trajectory, TrajectoryBuffer, compute_returns_to_go

__all__ = [
    "CachedStates",
    "DTConfig",
    "DecisionTransformer",
    "EpisodeRecord",
    "Trajectory",
    "TrajectoryBuffer",
    "angular_mse",
    "compute_returns_to_go",
    "diffusion_states",
    "dt_loss",
    "dt_train_step",
    "fit_scales",
    "make_batch",
    "perfect_csi",
    "predict_action",
    "rollout",
    "sample_batch",
    "wrapped_angle_error",
]
