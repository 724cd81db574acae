"""The five pipeline stages. Each is a pure function of (config, seed, upstream files)."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import stats

from .. import __version__
from ..channel import EnvConfig, roll_channels
from ..diffusion.model import ChannelDiffusion
from ..diffusion.vectorize import channel_to_vector
from ..dt.model import DecisionTransformer
from ..dt.train import CachedStates, diffusion_states, dt_train_step, fit_scales, perfect_csi, rollout
from ..dt.trajectory import TrajectoryBuffer
from ..expert import collect_trajectories, make_fewshot_buffer, random_policy_rates
from ..nn import AdamW, NamedTensorStore
from .config import VARIANTS, ExperimentConfig
from .metrics import (
    CURVE_HEADER,
    HISTOGRAM_HEADER,
    RATES_HEADER,
    MetricsLog,
    metric_series,
    read_manifest,
    write_manifest,
    write_table,
)

PRETRAIN_BUFFER = "pretrain.d2tb"
FEWSHOT_BUFFER = "fewshot.d2tb"
DM_CHECKPOINT = "dm.d2ts"
DT_CHECKPOINT = "dt.d2ts"
GENERATED = "generated.d2ts"


class MissingArtifactError(FileNotFoundError):
    pass


def _stream(config: ExperimentConfig, tag: str) -> int:
    """Independent 63-bit seed per (experiment seed, purpose)."""
    return int(np.random.SeedSequence([config.seed, zlib.crc32(tag.encode())]).generate_state(2, np.uint64)[0] >> 1)


def torch_generator(config: ExperimentConfig, tag: str) -> torch.Generator:
    return torch.Generator().manual_seed(_stream(config, tag))


def numpy_generator(config: ExperimentConfig, tag: str) -> np.random.Generator:
    return np.random.default_rng(_stream(config, tag))


def _prepare(config: ExperimentConfig, tag: str) -> None:
    torch.set_num_threads(config.threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(_stream(config, tag + "/init"))


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _finish(config: ExperimentConfig, stage: str, directory: Path, inputs: dict, outputs: list[str], **extra) -> dict:
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": config.seed,
        "config_hash": config.stage_hash(stage),
        "inputs": inputs,
        "outputs": {name: _file_digest(directory / name) for name in sorted(outputs)},
        **extra,
    }
    write_manifest(directory, manifest)
    return manifest


def _upstream(config: ExperimentConfig, stage: str, *files: str) -> Path:
    d = config.stage_dir(stage)
    for name in ("manifest.json", *files):
        if not (d / name).exists():
            raise MissingArtifactError(
                f"{d / name} is missing; run `d2t {stage}` with the same configuration first"
            )
    return d


def _stage_dir(config: ExperimentConfig, stage: str) -> Path:
    d = config.stage_dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dt_store(model: DecisionTransformer, optimizer: Optional[torch.optim.Optimizer], meta: dict) -> NamedTensorStore:
    store = model.to_store(meta)
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if state:
                    store[f"optim.exp_avg.{names[id(p)]}"] = state["exp_avg"]
                    store[f"optim.exp_avg_sq.{names[id(p)]}"] = state["exp_avg_sq"]
                    store[f"optim.step.{names[id(p)]}"] = np.array([state["step"]], dtype=np.int64)
    return store


def load_dt(path: Path) -> DecisionTransformer:
    store = NamedTensorStore.load(path)
    model_part = NamedTensorStore(
        ((k, v) for k, v in store.items() if not k.startswith("optim.")), meta=store.meta
    )
    return DecisionTransformer.from_store(model_part)


def target_return(config: ExperimentConfig, fewshot: TrajectoryBuffer, pretrain: TrajectoryBuffer) -> float:
    """R_1 handed to the policy: a margin above the best return seen in the new environment."""
    ref = fewshot if len(fewshot) else pretrain
    return float(config.eval.target_scale * ref.episode_returns().max())


def eval_episodes(config: ExperimentConfig) -> list[int]:
    return list(range(config.eval.first_episode, config.eval.first_episode + config.eval.episodes))


# -- collect -------------------------------------------------------------------


def cmd_collect(config: ExperimentConfig) -> dict:
    d = _stage_dir(config, "collect")
    log = MetricsLog(d, "collect", config.seed)
    envs = config.env.pretrain_envs()
    buffer = collect_trajectories(envs, config.expert, config.expert.episodes_per_env)
    buffer.save(d / PRETRAIN_BUFFER)
    new_id = len(envs)
    fewshot = make_fewshot_buffer(config.env.new_env(), config.expert, config.expert.fewshot_episodes, env_id=new_id)
    fewshot.save(d / FEWSHOT_BUFFER)

    rewards = buffer.stacked("rewards")
    ids = np.array([t.env_id for t in buffer])
    for i, name in enumerate(config.env.pretrain):
        log.log(0, **{f"mean_reward/{name}": float(rewards[ids == i].mean())})
    log.log(0, mean_reward=buffer.mean_reward())
    if len(fewshot):
        log.log(0, **{f"fewshot_mean_reward/{config.env.new}": fewshot.mean_reward()})
    return _finish(
        config, "collect", d, {}, [PRETRAIN_BUFFER, FEWSHOT_BUFFER, "metrics.csv"],
        env_tags={name: i for i, name in enumerate(config.env.pretrain)} | {config.env.new: new_id},
        trajectories=len(buffer), fewshot_trajectories=len(fewshot),
    )


def load_buffers(config: ExperimentConfig) -> tuple[TrajectoryBuffer, TrajectoryBuffer]:
    d = _upstream(config, "collect", PRETRAIN_BUFFER, FEWSHOT_BUFFER)
    return TrajectoryBuffer.load(d / PRETRAIN_BUFFER), TrajectoryBuffer.load(d / FEWSHOT_BUFFER)


# -- diffusion -----------------------------------------------------------------


def channel_pairs(buffer: TrajectoryBuffer) -> tuple[np.ndarray, np.ndarray]:
    """All (cascaded channel, pilots) slot pairs of a buffer, flattened over trajectories."""
    from ..diffusion.vectorize import vector_to_channel

    states = buffer.stacked("states").reshape(-1, 2 * buffer.N * buffer.M)
    pilots = buffer.stacked("pilots").reshape(-1, 2 * buffer.n_pilots)
    return vector_to_channel(states, buffer.N, buffer.M), pilots


def cmd_train_dm(config: ExperimentConfig) -> dict:
    _prepare(config, "train-dm")
    pretrain, _ = load_buffers(config)
    d = _stage_dir(config, "train-dm")
    log = MetricsLog(d, "train-dm", config.seed)
    Hs, ys = channel_pairs(pretrain)
    dc = config.diffusion
    dm = ChannelDiffusion(pretrain.N, pretrain.M, pretrain.n_pilots, dc.schedule(), dc.unet, dc.guidance)
    dm.fit_normalization(Hs, ys)
    t = config.train
    opt = AdamW(dm.net.parameters(), lr=t.lr_dm, weight_decay=t.weight_decay)
    gen = torch_generator(config, "train-dm/noise")
    rng = numpy_generator(config, "train-dm/batches")
    running = []
    for i in range(1, t.I2 + 1):
        idx = rng.integers(0, len(Hs), size=t.batch_dm)
        running.append(dm.train_step(Hs[idx], ys[idx], opt, gen))
        if i == 1 or i % t.log_every == 0 or i == t.I2:
            log.log(i, loss=float(np.mean(running)))
            running = []
    dm.to_store().save(d / DM_CHECKPOINT)
    return _finish(config, "train-dm", d, {"collect": config.stage_hash("collect")}, [DM_CHECKPOINT, "metrics.csv"])


def load_dm(config: ExperimentConfig) -> ChannelDiffusion:
    d = _upstream(config, "train-dm", DM_CHECKPOINT)
    return ChannelDiffusion.from_store(NamedTensorStore.load(d / DM_CHECKPOINT))


# -- decision transformer ------------------------------------------------------


def train_dt(
    model: DecisionTransformer,
    buffer: TrajectoryBuffer,
    steps: int,
    lr: float,
    config: ExperimentConfig,
    tag: str,
    on_step=None,
) -> AdamW:
    """``steps`` behaviour-cloning updates; ``on_step(i, loss)`` after each."""
    t = config.train
    opt = AdamW(model.parameters(), lr=lr, weight_decay=t.weight_decay)
    rng = numpy_generator(config, tag + "/batches")
    torch.manual_seed(_stream(config, tag + "/dropout"))
    for i in range(1, steps + 1):
        loss = dt_train_step(model, buffer, opt, t.batch_dt, rng, t.grad_clip)
        if on_step is not None:
            on_step(i, loss)
    return opt


def cmd_pretrain_dt(config: ExperimentConfig) -> dict:
    _prepare(config, "pretrain-dt")
    pretrain, _ = load_buffers(config)
    d = _stage_dir(config, "pretrain-dt")
    log = MetricsLog(d, "pretrain-dt", config.seed)
    model = DecisionTransformer(2 * pretrain.N * pretrain.M, pretrain.N, config.dt)
    fit_scales(model, pretrain)
    t = config.train
    running = []

    def on_step(i, loss):
        running.append(loss)
        if i == 1 or i % t.log_every == 0 or i == t.I1:
            log.log(i, loss=float(np.mean(running)))
            running.clear()

    opt = train_dt(model, pretrain, t.I1, t.lr_dt, config, "pretrain-dt", on_step)
    _dt_store(model, opt, {"stage": "pretrain-dt"}).save(d / DT_CHECKPOINT)
    return _finish(config, "pretrain-dt", d, {"collect": config.stage_hash("collect")}, [DT_CHECKPOINT, "metrics.csv"])


# -- generated states for the new environment ---------------------------------


def generate_states(config: ExperimentConfig, dm: ChannelDiffusion, env: EnvConfig) -> CachedStates:
    """Channels generated from the pilots of every evaluation slot, sampled once."""
    cache = CachedStates(diffusion_states(dm, torch_generator(config, "d2t/sampler")))
    cache.prefill(env, eval_episodes(config))
    return cache


def save_states(cache: CachedStates, path: Path) -> None:
    store = NamedTensorStore(meta={"kind": "generated-channels"})
    keys = sorted(cache.cache)
    store["episode_slot"] = np.array(keys, dtype=np.int64)
    store["channels"] = np.stack([cache.cache[k] for k in keys]).astype(np.complex128)
    store.save(path)


def load_states(path: Path) -> CachedStates:
    store = NamedTensorStore.load(path)

    def missing(*_):
        raise KeyError("no generated channel stored for this (episode, slot)")

    cache = CachedStates(missing)
    for (ep, t), H in zip(store["episode_slot"].tolist(), store["channels"]):
        cache.cache[(ep, t)] = H
    return cache


def curve_points(config: ExperimentConfig, steps: int) -> set[int]:
    every = config.eval.curve_every
    return set(range(0, steps + 1, every)) | {steps}


# -- finetune ------------------------------------------------------------------


def cmd_finetune(config: ExperimentConfig) -> dict:
    _prepare(config, "finetune")
    pretrain, fewshot = load_buffers(config)
    src = _upstream(config, "pretrain-dt", DT_CHECKPOINT)
    dm = load_dm(config)
    d = _stage_dir(config, "finetune")
    log = MetricsLog(d, "finetune", config.seed)
    env = config.env.new_env()
    episodes = eval_episodes(config)
    target = target_return(config, fewshot, pretrain)

    states = generate_states(config, dm, env)
    save_states(states, d / GENERATED)

    model = load_dt(src / DT_CHECKPOINT)

    def evaluate(step: int, **extra) -> None:
        rec = rollout(model, env, episodes, target, states_from=states)
        log.log(step, rate_d2t=rec.mean_rate, **extra)

    # zero-shot first: nothing below may touch the model before this line
    zero = rollout(model, env, episodes, target, states_from=perfect_csi).mean_rate
    evaluate(0, rate_dt_pc=zero)

    steps = config.train.finetune_steps if len(fewshot) else 0
    if steps == 0:
        # nothing to learn from: the output checkpoint is the input checkpoint
        (d / DT_CHECKPOINT).write_bytes((src / DT_CHECKPOINT).read_bytes())
    else:
        points = curve_points(config, steps)

        def on_step(i, loss):
            if i in points:
                evaluate(i, loss=loss)

        opt = train_dt(model, fewshot, steps, config.train.finetune_lr, config, "finetune", on_step)
        _dt_store(model, opt, {"stage": "finetune"}).save(d / DT_CHECKPOINT)
    return _finish(
        config, "finetune", d,
        {"pretrain-dt": config.stage_hash("pretrain-dt"), "train-dm": config.stage_hash("train-dm")},
        [DT_CHECKPOINT, GENERATED, "metrics.csv"],
        target_return=target, finetune_steps=steps, eval_episodes=[episodes[0], episodes[-1]],
    )


# -- eval ----------------------------------------------------------------------


def channel_histograms(true_H: np.ndarray, generated_H: np.ndarray, bins: int) -> list[tuple]:
    """Per real coordinate: shared bin edges, counts of true and generated samples."""
    xt, xg = channel_to_vector(true_H), channel_to_vector(generated_H)
    rows = []
    for c in range(xt.shape[1]):
        lo = float(min(xt[:, c].min(), xg[:, c].min()))
        hi = float(max(xt[:, c].max(), xg[:, c].max()))
        edges = np.linspace(lo, hi, bins + 1)
        ct, _ = np.histogram(xt[:, c], edges)
        cg, _ = np.histogram(xg[:, c], edges)
        rows += [(c, float(edges[b]), float(edges[b + 1]), int(ct[b]), int(cg[b])) for b in range(bins)]
    return rows


def ks_per_coordinate(true_H: np.ndarray, generated_H: np.ndarray) -> np.ndarray:
    xt, xg = channel_to_vector(true_H), channel_to_vector(generated_H)
    return np.array([stats.ks_2samp(xt[:, c], xg[:, c]).statistic for c in range(xt.shape[1])])


def per_episode(rates: np.ndarray) -> list[float]:
    return [float(r) for r in np.asarray(rates).mean(axis=1)]


def cmd_eval(config: ExperimentConfig, variant: str) -> dict:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    _prepare(config, f"eval/{variant}")
    env = config.env.new_env()
    episodes = eval_episodes(config)
    d = config.stage_dir("eval") / variant
    d.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(d, f"eval/{variant}", config.seed)
    outputs = ["metrics.csv", "rates.csv"]
    inputs: dict = {}

    if variant == "random":
        rates = random_policy_rates(env, len(episodes), episodes[0], seed=_stream(config, "eval/random"))
    elif variant == "expert":
        buf = collect_trajectories([env], config.expert, len(episodes), first_episode=episodes[0], rng_tag=2)
        rates = buf.stacked("rewards")
    else:
        ft = _upstream(config, "finetune", DT_CHECKPOINT, GENERATED)
        inputs["finetune"] = config.stage_hash("finetune")
        target = read_manifest(ft)["target_return"]
        states = load_states(ft / GENERATED)
        if variant == "scratch-dt":
            rates = _scratch_curve(config, env, episodes, target, states, d, ft)
            outputs.append("learning_curve.csv")
        else:
            model = load_dt(ft / DT_CHECKPOINT)
            provider = states if variant == "d2t" else perfect_csi
            rates = rollout(model, env, episodes, target, states_from=provider).rewards
        if variant == "d2t":
            true_H = np.concatenate([roll_channels(env, ep)[0] for ep in episodes])
            gen_H = np.stack([states.cache[(ep, t)] for ep in episodes for t in range(env.T)])
            write_table(d / "histogram.csv", HISTOGRAM_HEADER, channel_histograms(true_H, gen_H, config.eval.hist_bins))
            outputs.append("histogram.csv")
            ks = ks_per_coordinate(true_H, gen_H)
            log.log(0, ks_max=float(ks.max()), ks_mean=float(ks.mean()))

    ep_rates = per_episode(rates)
    write_table(d / "rates.csv", RATES_HEADER, [(variant, ep, r) for ep, r in zip(episodes, ep_rates)])
    log.log(0, mean_rate=float(np.mean(rates)))
    manifest = {
        "stage": "eval",
        "variant": variant,
        "version": __version__,
        "seed": config.seed,
        "config_hash": config.stage_hash("eval"),
        "inputs": inputs,
        "outputs": {name: _file_digest(d / name) for name in sorted(outputs)},
        "mean_rate": float(np.mean(rates)),
    }
    write_manifest(d, manifest)
    return manifest


def _scratch_curve(config, env, episodes, target, states, d: Path, ft: Path) -> np.ndarray:
    """Train a fresh DT on the few-shot buffer only; write both learning curves."""
    _, fewshot = load_buffers(config)
    if len(fewshot) == 0:
        raise ValueError("the scratch baseline needs a non-empty few-shot buffer")
    model = DecisionTransformer(2 * env.N * env.M, env.N, config.dt)
    fit_scales(model, fewshot)
    steps = config.train.finetune_steps
    points = curve_points(config, steps)
    curve = [(0, rollout(model, env, episodes, target, states_from=states).mean_rate)]

    def on_step(i, loss):
        if i in points:
            curve.append((i, rollout(model, env, episodes, target, states_from=states).mean_rate))

    train_dt(model, fewshot, steps, config.train.scratch_lr, config, "scratch-dt", on_step)
    finetuned = metric_series(ft / "metrics.csv", "rate_d2t")
    rows = [("finetuned", s, r) for s, r in finetuned] + [("scratch", s, r) for s, r in curve]
    write_table(d / "learning_curve.csv", CURVE_HEADER, rows)
    return rollout(model, env, episodes, target, states_from=states).rewards


STAGE_FUNCS = {
    "collect": cmd_collect,
    "train-dm": cmd_train_dm,
    "pretrain-dt": cmd_pretrain_dt,
    "finetune": cmd_finetune,
}


def run_all(config: ExperimentConfig) -> dict:
    """Every enabled stage in order; returns the manifests."""
    s = config.stages
    out = {}
    for name, enabled in (("collect", s.collect), ("train-dm", s.train_dm), ("pretrain-dt", s.pretrain_dt),
                          ("finetune", s.finetune)):
        if enabled:
            out[name] = STAGE_FUNCS[name](config)
    for variant in s.eval:
        out[f"eval/{variant}"] = cmd_eval(config, variant)
    return out


def replace_config(config: ExperimentConfig, **sections) -> ExperimentConfig:
    """Convenience for tests: ``replace_config(cfg, train={'I1': 10})``."""
    changes = {}
    for name, value in sections.items():
        current = getattr(config, name)
        changes[name] = replace(current, **value) if isinstance(value, dict) else value
    return replace(config, **changes)
