from .config import PRESETS, STAGES, VARIANTS, ConfigError, ExperimentConfig, default_config, load_config
from .stages import (
    MissingArtifactError,
    cmd_collect,
    cmd_eval,
    cmd_finetune,
    cmd_pretrain_dt,
    cmd_train_dm,
    run_all,
)

__all__ = [
    "PRESETS",
    "STAGES",
    "VARIANTS",
    "ConfigError",
    "ExperimentConfig",
    "MissingArtifactError",
    "cmd_collect",
    "cmd_eval",
    "cmd_finetune",
    "cmd_pretrain_dt",
    "cmd_train_dm",
    "default_config",
    "load_config",
    "run_all",
]
