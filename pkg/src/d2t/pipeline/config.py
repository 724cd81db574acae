"""Experiment configuration: YAML schema, environment presets and stage hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..channel import EnvConfig
from ..diffusion.model import GuidanceConfig
from ..diffusion.schedule import DiffusionSchedule, build_schedule
from ..diffusion.unet import UNetConfig
from ..dt.model import DTConfig
from ..expert import ExpertConfig


class ConfigError(ValueError):
    pass


# Line-of-sight geometry of the deployment (BS departure, IRS arrival, IRS
# departure towards the user), shared by the presets below.
SITE_LOS_ANGLES = (0.3, -0.5, 0.7)

# Named environments. They differ in BS-IRS distance, Rician factors, the
# IRS-user path-loss exponent and the scattering seed. Give a preset its own
# ``los_angles`` through ``env.overrides`` to move the array geometry as well.
PRESETS: dict[str, dict[str, Any]] = {
    "urban": dict(d1=40.0, kappa1=3.0, kappa2=2.0, xi2=3.0, seed=101, los_angles=SITE_LOS_ANGLES),
    "suburban": dict(d1=60.0, kappa1=6.0, kappa2=5.0, xi2=2.8, seed=102, los_angles=SITE_LOS_ANGLES),
    "rural": dict(d1=80.0, kappa1=10.0, kappa2=10.0, xi2=2.5, seed=103, los_angles=SITE_LOS_ANGLES),
    "campus": dict(d1=50.0, kappa1=10.0, kappa2=10.0, xi2=2.8, seed=200, los_angles=SITE_LOS_ANGLES),
}

STAGES = ("collect", "train-dm", "pretrain-dt", "finetune", "eval")
VARIANTS = ("d2t", "dt-pc", "scratch-dt", "random", "expert")


@dataclass(frozen=True)
class EnvSection:
    N: int = 8
    M: int = 4
    T: int = 20
    pretrain: tuple[str, ...] = ("urban", "suburban", "rural")
    new: str = "campus"
    # preset name -> EnvConfig field overrides; unknown names define new presets
    overrides: dict = field(default_factory=dict)

    def resolve(self, name: str) -> EnvConfig:
        if name not in PRESETS and name not in self.overrides:
            raise ConfigError(f"unknown environment preset {name!r}; known: {sorted(PRESETS)}")
        params = {**PRESETS.get(name, {}), **self.overrides.get(name, {})}
        params.update(N=self.N, M=self.M, T=self.T)
        try:
            return EnvConfig.from_dict(params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"preset {name!r}: {exc}") from exc

    def pretrain_envs(self) -> list[EnvConfig]:
        return [self.resolve(n) for n in self.pretrain]

    def new_env(self) -> EnvConfig:
        return self.resolve(self.new)


@dataclass(frozen=True)
class DiffusionSection:
    K: int = 500
    beta_min: float = 1e-4
    beta_max: float = 0.02
    guidance: GuidanceConfig = GuidanceConfig()
    unet: UNetConfig = UNetConfig()

    def schedule(self) -> DiffusionSchedule:
        return build_schedule(self.K, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class TrainConfig:
    lr_dt: float = 1e-4  # lambda_1
    lr_dm: float = 1e-4  # lambda_2
    weight_decay: float = 1e-4
    I1: int = 5000  # decision-transformer iterations
    I2: int = 10000  # diffusion iterations
    batch_dt: int = 64
    batch_dm: int = 64
    grad_clip: float = 1.0
    finetune_steps: int = 500
    finetune_lr: float = 1e-5
    scratch_lr: float = 1e-4
    log_every: int = 50


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 30
    first_episode: int = 10_000
    target_scale: float = 1.1
    curve_every: int = 25
    hist_bins: int = 40


@dataclass(frozen=True)
class StageToggles:
    collect: bool = True
    train_dm: bool = True
    pretrain_dt: bool = True
    finetune: bool = True
    eval: tuple[str, ...] = VARIANTS


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out: str = "runs"
    threads: int = 1
    env: EnvSection = EnvSection()
    expert: ExpertConfig = ExpertConfig()
    diffusion: DiffusionSection = DiffusionSection()
    dt: DTConfig = DTConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    stages: StageToggles = StageToggles()

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.expert.L != len(self.env.pretrain):
            raise ConfigError(
                f"expert.L = {self.expert.L} but {len(self.env.pretrain)} pre-training presets are listed"
            )
        if self.env.new in self.env.pretrain:
            raise ConfigError(f"the new environment {self.env.new!r} is also a pre-training preset")
        if self.dt.max_timestep < self.env.T:
            raise ConfigError("dt.max_timestep must cover the episode length")
        for name in (*self.env.pretrain, self.env.new):
            self.env.resolve(name)
        bad = set(self.stages.eval) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown eval variants {sorted(bad)}; choose from {VARIANTS}")
        for name in ("I1", "I2", "batch_dt", "batch_dm", "log_every"):
            if getattr(self.train, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.train.finetune_steps < 0 or self.eval.curve_every < 1 or self.eval.episodes < 1:
            raise ConfigError("finetune_steps >= 0, curve_every >= 1 and eval episodes >= 1 are required")
        if self.expert.episodes_per_env < 1:
            raise ConfigError("expert.episodes_per_env must be >= 1")
        self.diffusion.schedule()

    # -- io ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
        if "seed" not in data:
            raise ConfigError("configuration requires an explicit seed")
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: configuration root must be a mapping")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def explain(self) -> str:
        """Fully resolved configuration including the derived environment parameters."""
        doc = self.to_dict()
        doc["resolved_envs"] = {
            name: self.env.resolve(name).to_dict() for name in (*self.env.pretrain, self.env.new)
        }
        doc["stage_dirs"] = {stage: str(self.stage_dir(stage)) for stage in STAGES}
        return yaml.safe_dump(doc, sort_keys=False)

    # -- content addressing ------------------------------------------------

    def stage_inputs(self, stage: str) -> dict:
        """Everything a stage's outputs depend on, including upstream stage hashes."""
        envs = {n: self.env.resolve(n).to_dict() for n in (*self.env.pretrain, self.env.new)}
        t = self.train
        if stage == "collect":
            return {"envs": envs, "pretrain": list(self.env.pretrain), "new": self.env.new,
                    "expert": asdict(self.expert)}
        if stage == "train-dm":
            return {"collect": self.stage_hash("collect"), "seed": self.seed,
                    "diffusion": _plain(asdict(self.diffusion)),
                    "train": [t.lr_dm, t.weight_decay, t.I2, t.batch_dm, t.log_every]}
        if stage == "pretrain-dt":
            return {"collect": self.stage_hash("collect"), "seed": self.seed, "dt": asdict(self.dt),
                    "train": [t.lr_dt, t.weight_decay, t.I1, t.batch_dt, t.grad_clip, t.log_every]}
        if stage == "finetune":
            return {"pretrain-dt": self.stage_hash("pretrain-dt"), "train-dm": self.stage_hash("train-dm"),
                    "seed": self.seed, "eval": asdict(self.eval),
                    "train": [t.finetune_steps, t.finetune_lr, t.weight_decay, t.batch_dt, t.grad_clip]}
        if stage == "eval":
            return {"finetune": self.stage_hash("finetune"), "seed": self.seed,
                    "train": [t.scratch_lr, t.finetune_steps], "dt": asdict(self.dt)}
        raise ConfigError(f"unknown stage {stage!r}; stages are {STAGES}")

    def stage_hash(self, stage: str) -> str:
        blob = json.dumps(self.stage_inputs(stage), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def stage_dir(self, stage: str) -> Path:
        return Path(self.out) / f"{stage}-{self.stage_hash(stage)}"


# -- schema-driven construction ------------------------------------------------


def _plain(obj):
    """Tuples -> lists recursively, so the result is YAML/JSON friendly."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where + ".")
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (inner, *_) = typing.get_args(tp)
        return tuple(_coerce(inner, v, where) for v in value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return {str(k): v for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def default_config(seed: int = 0, **changes) -> ExperimentConfig:
    return dataclasses.replace(ExperimentConfig(seed=seed), **changes)


def load_config(path: Optional[str | Path], seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Config from file (or defaults when ``path`` is None); CLI ``--seed``/``--out`` win."""
    if path is None:
        if seed is None:
            raise ConfigError("no config file given: --seed is required")
        data: dict = {"seed": seed}
        if out is not None:
            data["out"] = out
        return ExperimentConfig.from_dict(data)
    return ExperimentConfig.load(path, seed=seed, out=out)
