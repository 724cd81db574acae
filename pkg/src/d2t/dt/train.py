"""Behaviour-cloning training and autoregressive rollout of the decision transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..channel import EnvConfig, IRSEnv, quantize_reward
from ..diffusion.vectorize import channel_to_vector
from .model import DecisionTransformer
from .trajectory import TrajectoryBuffer


def wrapped_angle_error(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Signed angular difference mapped to [-pi, pi)."""
    return torch.remainder(pred - target + math.pi, 2 * math.pi) - math.pi


def angular_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return wrapped_angle_error(pred, target).pow(2).mean()


def fit_scales(model: DecisionTransformer, buffer: TrajectoryBuffer) -> None:
    """State scale = RMS of channel vectors; return scale = T x best single-slot reward."""
    states = buffer.stacked("states")
    rewards = buffer.stacked("rewards")
    model.state_scale.fill_(float(np.sqrt(np.mean(states**2))))
    model.rtg_scale.fill_(float(buffer.T * rewards.max()))


@dataclass
class Batch:
    returns_to_go: torch.Tensor
    states: torch.Tensor
    actions: torch.Tensor
    timesteps: torch.Tensor


def make_batch(model: DecisionTransformer, rtg, states, actions, timesteps) -> Batch:
    dtype = model.state_scale.dtype
    return Batch(
        torch.as_tensor(np.asarray(rtg) / float(model.rtg_scale), dtype=dtype),
        torch.as_tensor(np.asarray(states) / float(model.state_scale), dtype=dtype),
        torch.as_tensor(np.asarray(actions), dtype=dtype),
        torch.as_tensor(np.array(timesteps), dtype=torch.long),
    )


def sample_batch(
    model: DecisionTransformer,
    buffer: TrajectoryBuffer,
    batch_size: int,
    generator: np.random.Generator,
) -> Batch:
    """Random windows of ``context`` consecutive steps (uniform over trajectories and starts)."""
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty buffer")
    c = model.config.context
    idx = generator.integers(0, len(buffer), size=batch_size)
    starts = generator.integers(0, buffer.T - c + 1, size=batch_size)
    rtg, states, actions, steps = [], [], [], []
    for i, s in zip(idx, starts):
        tr = buffer[int(i)]
        rtg.append(tr.returns_to_go[s : s + c])
        states.append(tr.states[s : s + c])
        actions.append(tr.actions[s : s + c])
        steps.append(np.arange(s, s + c))
    return make_batch(model, np.stack(rtg), np.stack(states), np.stack(actions), np.stack(steps))


def dt_loss(model: DecisionTransformer, batch: Batch) -> torch.Tensor:
    pred = model(batch.returns_to_go, batch.states, batch.actions, batch.timesteps)
    return angular_mse(pred, batch.actions)


def dt_train_step(
    model: DecisionTransformer,
    buffer: TrajectoryBuffer,
    optimizer: torch.optim.Optimizer,
    batch_size: int,
    generator: np.random.Generator,
    grad_clip: Optional[float] = 1.0,
) -> float:
    model.train()
    batch = sample_batch(model, buffer, batch_size, generator)
    optimizer.zero_grad(set_to_none=True)
    loss = dt_loss(model, batch)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.detach())


# -- inference -------------------------------------------------------------

# (true channels (B, N, M), pilots (B, 2 N_p), episodes, slot) -> channels the DT sees
StateProvider = Callable[[np.ndarray, np.ndarray, Sequence[int], int], np.ndarray]


def perfect_csi(H: np.ndarray, pilots: np.ndarray, episodes: Sequence[int], t: int) -> np.ndarray:
    """DT-PC: the policy sees the true cascaded channel."""
    return H


def diffusion_states(dm, generator: torch.Generator) -> StateProvider:
    """D2T: the policy sees the channel generated from this slot's pilots."""

    def provide(H, pilots, episodes, t):
        return dm.sample(pilots, generator)

    return provide


class CachedStates:
    """Wraps a provider and remembers its answer per (episode, slot).

    Generated channels depend only on pilots and sampler noise, never on the
    actions taken, so repeated evaluations of different policies on the same
    episodes can share them.
    """

    def __init__(self, provider: StateProvider):
        self.provider = provider
        self.cache: dict[tuple[int, int], np.ndarray] = {}

    def __call__(self, H, pilots, episodes, t):
        missing = [i for i, ep in enumerate(episodes) if (ep, t) not in self.cache]
        if missing:
            out = self.provider(H[missing], pilots[missing], [episodes[i] for i in missing], t)
            for j, i in enumerate(missing):
                self.cache[(episodes[i], t)] = out[j]
        return np.stack([self.cache[(ep, t)] for ep in episodes])

    def prefill(self, env: EnvConfig, episodes: Sequence[int]) -> None:
        """Generate every slot of ``episodes`` in one batched call per slot."""
        from ..channel import roll_channels

        rolls = [roll_channels(env, ep) for ep in episodes]
        Hs = np.stack([r[0] for r in rolls])
        ys = np.stack([r[1] for r in rolls])
        eps = list(episodes)
        flat_H = Hs.reshape(-1, *Hs.shape[2:])
        flat_y = ys.reshape(-1, ys.shape[-1])
        keys = [(ep, t) for ep in eps for t in range(env.T)]
        todo = [i for i, key in enumerate(keys) if key not in self.cache]
        if todo:
            out = self.provider(flat_H[todo], flat_y[todo], [keys[i][0] for i in todo], -1)
            for j, i in enumerate(todo):
                self.cache[keys[i]] = out[j]


@dataclass
class EpisodeRecord:
    episodes: list[int]
    rewards: np.ndarray  # (B, T)
    returns_to_go: np.ndarray  # (B, T + 1), R_1 .. R_{T+1}
    actions: np.ndarray  # (B, T, N)
    states: np.ndarray  # (B, T, 2NM) channels the policy saw
    extras: dict = field(default_factory=dict)

    @property
    def mean_rate(self) -> float:
        return float(self.rewards.mean())


@torch.no_grad()
def predict_action(
    model: DecisionTransformer,
    rtg: np.ndarray,
    states: np.ndarray,
    actions: np.ndarray,
) -> np.ndarray:
    """Action for the last step of each history (B, t, ...), using the last ``context`` steps."""
    c = model.config.context
    t = rtg.shape[1]
    lo = max(0, t - c)
    steps = np.broadcast_to(np.arange(lo, t), (rtg.shape[0], t - lo))
    batch = make_batch(model, rtg[:, lo:], states[:, lo:], actions[:, lo:], steps)
    model.eval()
    pred = model(batch.returns_to_go, batch.states, batch.actions, batch.timesteps)
    return pred[:, -1].to(torch.float64).numpy()


def rollout(
    model: DecisionTransformer,
    env: EnvConfig,
    episodes: Sequence[int],
    target_return: float,
    states_from: StateProvider = perfect_csi,
) -> EpisodeRecord:
    """Algorithm-2 style inference, vectorised over independent episodes.

    Per slot: observe pilots, obtain the state channel from ``states_from``,
    predict the action from the (return-to-go, state, action) history, collect
    the MRT rate and decrement the return-to-go by it.
    """
    episodes = list(episodes)
    B, T, N = len(episodes), env.T, env.N
    envs = [IRSEnv(env, ep) for ep in episodes]
    first = [e.reset() for e in envs]
    H = np.stack([c.H for c, _ in first])
    y = np.stack([p for _, p in first])

    rtg = np.zeros((B, T + 1))
    rtg[:, 0] = float(quantize_reward(target_return))
    states = np.zeros((B, T, 2 * env.N * env.M))
    actions = np.zeros((B, T, N))
    rewards = np.zeros((B, T))
    for t in range(T):
        seen = states_from(H, y, episodes, t)
        states[:, t] = channel_to_vector(seen)
        actions[:, t] = predict_action(model, rtg[:, : t + 1], states[:, : t + 1], actions[:, : t + 1])
        results = [e.step(a) for e, a in zip(envs, actions[:, t])]
        rewards[:, t] = [r.reward for r in results]
        rtg[:, t + 1] = rtg[:, t] - rewards[:, t]
        if t + 1 < T:
            H = np.stack([r.channel.H for r in results])
            y = np.stack([r.pilots for r in results])
    return EpisodeRecord(episodes, rewards, rtg, actions, states)
