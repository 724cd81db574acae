"""Expert phase optimiser, exhaustive quantised oracle and trajectory collection.

The expert stands in for converged RL policies: it maximises the per-slot
channel gain ``g(phi) = ||phi^T H||^2`` (the rate is monotone in g) by gradient
ascent on the angles with Armijo backtracking and random restarts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import (
    DegenerateChannelError,
    EnvConfig,
    achievable_rate,
    channel_gain,
    quantize_reward,
    roll_channels,
    wrap_angle,
)
from .diffusion.vectorize import channel_to_vector
from .dt.trajectory import Trajectory, TrajectoryBuffer


@dataclass(frozen=True)
class ExpertConfig:
    restarts: int = 8
    max_iter: int = 200
    step_size: float = 1.0
    tol: float = 1e-10
    armijo: float = 1e-4
    max_halvings: int = 40
    Q: int = 16
    L: int = 3
    episodes_per_env: int = 100
    fewshot_episodes: int = 16
    fewshot_restarts: int = 1
    fewshot_max_iter: int = 10

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.Q < 2:
            raise ValueError("oracle quantisation needs Q >= 2")
        if self.L < 1:
            raise ValueError("need at least one environment")

    def suboptimal(self) -> "ExpertConfig":
        """Reduced budget used to produce the few-shot fine-tuning data."""
        return ExpertConfig(
            **{**self.__dict__, "restarts": self.fewshot_restarts, "max_iter": self.fewshot_max_iter}
        )


@dataclass
class ExpertResult:
    phases: np.ndarray  # (..., N), best restart
    gain: np.ndarray  # ||phi^T H||^2 of the returned phases
    accepted_steps: np.ndarray  # improving steps taken by the returned restart
    history: Optional[np.ndarray] = None  # (iters+1, ..., restarts) objective trace


def _gain_and_grad(theta: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """theta (..., R, N), H (..., N, M) -> g (..., R), dg/dtheta (..., R, N)."""
    e = np.exp(1j * theta)
    u = np.einsum("...rn,...nm->...rm", e, H)
    g = np.sum(u.real**2 + u.imag**2, axis=-1)
    # dg/dtheta_n = -2 Im(e^{j theta_n} sum_m H[n, m] conj(u_m))
    grad = -2.0 * np.imag(e * np.einsum("...nm,...rm->...rn", H, u.conj()))
    return g, grad


def optimize_phases_batch(
    H: np.ndarray,
    config: ExpertConfig,
    rng: np.random.Generator,
    trace: bool = False,
) -> ExpertResult:
    """Vectorised expert over a batch of channels H (..., N, M)."""
    H = np.asarray(H, dtype=complex)
    scale = np.linalg.norm(H, axis=(-2, -1))
    if np.any(scale == 0):
        raise DegenerateChannelError("all-zero channel has no optimal phase configuration")
    Hn = H / scale[..., None, None]
    batch = H.shape[:-2]
    N = H.shape[-2]
    theta = rng.uniform(-np.pi, np.pi, size=(*batch, config.restarts, N))
    g, grad = _gain_and_grad(theta, Hn)
    step = np.full(g.shape, config.step_size)
    accepted = np.zeros(g.shape, dtype=np.int64)
    active = np.ones(g.shape, dtype=bool)
    history = [g.copy()] if trace else None

    for _ in range(config.max_iter):
        gnorm2 = np.sum(grad**2, axis=-1)
        active &= gnorm2 > config.tol
        if not active.any():
            if trace:
                history.append(g.copy())
            continue
        t = np.where(active, np.minimum(2.0 * step, 64.0 * config.step_size), 0.0)
        done = ~active
        new_theta, new_g = theta.copy(), g.copy()
        for _ in range(config.max_halvings):
            cand = theta + t[..., None] * grad
            cg, _ = _gain_and_grad(cand, Hn)
            ok = ~done & (cg >= g + config.armijo * t * gnorm2) & (cg > g)
            new_theta[ok] = cand[ok]
            new_g[ok] = cg[ok]
            step[ok] = t[ok]
            done |= ok
            if done.all():
                break
            t = np.where(done, t, 0.5 * t)
        improved = new_g > g
        accepted += improved
        # restarts whose line search failed have converged to working precision
        active &= improved
        theta, g = new_theta, new_g
        _, grad = _gain_and_grad(theta, Hn)
        if trace:
            history.append(g.copy())

    best = np.argmax(g, axis=-1)
    pick = lambda a: np.take_along_axis(a, best[..., None], axis=-1)[..., 0]
    phases = wrap_angle(np.take_along_axis(theta, best[..., None, None], axis=-2)[..., 0, :])
    return ExpertResult(
        phases=phases,
        gain=channel_gain(phases, H),
        accepted_steps=pick(accepted),
        history=np.stack(history) if trace else None,
    )


def optimize_phases(H: np.ndarray, config: ExpertConfig, rng: np.random.Generator) -> np.ndarray:
    """Best phase vector (N angles in [-pi, pi)) for one channel H (N x M)."""
    return optimize_phases_batch(np.asarray(H)[None], config, rng).phases[0]


def canonical_phases(phases: np.ndarray) -> np.ndarray:
    """Remove the global-phase ambiguity: rotate so the first element is 0."""
    phases = np.asarray(phases, dtype=float)
    return wrap_angle(phases - phases[..., :1])


def coherent_phases(H: np.ndarray) -> np.ndarray:
    """Closed-form optimum for M = 1: align every reflected path."""
    return wrap_angle(-np.angle(np.asarray(H)[..., :, 0]))


TIE_RTOL = 1e-12


def exhaustive_phase_oracle(H: np.ndarray, Q: int, config: EnvConfig) -> tuple[np.ndarray, float]:
    """Best of all Q**N phase vectors on the grid 2*pi*q/Q; ties resolve to the first.

    Gains within a relative ``TIE_RTOL`` count as ties, since equal-rate
    candidates (e.g. global phase shifts) differ only by float rounding.
    """
    N = H.shape[0]
    if Q**N > 10**7:
        raise ValueError(f"Q**N = {Q**N} candidates exceeds the 1e7 guard")
    grid = 2 * np.pi * np.arange(Q) / Q
    best_gain, best_idx = -1.0, None
    chunk = 1 << 16
    combos = itertools.product(range(Q), repeat=N)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        gains = channel_gain(grid[block], H)
        top = gains.max()
        i = int(np.argmax(gains >= top * (1 - TIE_RTOL)))
        if top > best_gain * (1 + TIE_RTOL):
            best_gain, best_idx = float(gains[i]), block[i]
    phases = wrap_angle(grid[best_idx])
    return phases, float(achievable_rate(phases, H, config))


def expert_episode_rng(config: EnvConfig, episode: int, tag: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, 0xEC, tag, episode]))


def collect_trajectories(
    envs: Sequence[EnvConfig],
    expert: ExpertConfig,
    episodes: int,
    env_ids: Optional[Sequence[int]] = None,
    first_episode: int = 0,
    rng_tag: int = 0,
) -> TrajectoryBuffer:
    """Roll the expert for ``episodes`` episodes in each environment.

    Each trajectory keeps the raw channel vectors as states, the canonical
    expert phases as actions, the MRT rates as rewards and the noisy pilot
    observations of every slot (the diffusion model's training pairs).
    """
    if not envs:
        raise ValueError("need at least one environment")
    ref = envs[0]
    for cfg in envs:
        if (cfg.N, cfg.M, cfg.T) != (ref.N, ref.M, ref.T):
            raise ValueError("all environments must share N, M and T")
    env_ids = list(range(len(envs))) if env_ids is None else list(env_ids)
    buffer = TrajectoryBuffer(ref.N, ref.M, ref.T, ref.n_pilots)
    for env_id, cfg in zip(env_ids, envs):
        for ep in range(first_episode, first_episode + episodes):
            Hs, ys = roll_channels(cfg, ep)
            result = optimize_phases_batch(Hs, expert, expert_episode_rng(cfg, ep, rng_tag))
            actions = canonical_phases(result.phases)
            rewards = quantize_reward(achievable_rate(actions, Hs, cfg))
            buffer.add(Trajectory.from_rollout(channel_to_vector(Hs), actions, rewards, ys, env_id))
    return buffer


def make_fewshot_buffer(
    env: EnvConfig,
    expert: ExpertConfig,
    count: Optional[int] = None,
    env_id: int = 0,
    first_episode: int = 0,
) -> TrajectoryBuffer:
    """Small fine-tuning set from a deliberately under-budgeted expert."""
    count = expert.fewshot_episodes if count is None else count
    if count == 0:
        return TrajectoryBuffer(env.N, env.M, env.T, env.n_pilots)
    return collect_trajectories([env], expert.suboptimal(), count, [env_id], first_episode, rng_tag=1)


def random_policy_rates(env: EnvConfig, episodes: int, first_episode: int = 0, seed: int = 0) -> np.ndarray:
    """Per-slot rates (episodes, T) of uniformly random phases on the same channels."""
    rng = np.random.default_rng([seed, 0x7A])
    out = []
    for ep in range(first_episode, first_episode + episodes):
        Hs, _ = roll_channels(env, ep)
        phases = rng.uniform(-np.pi, np.pi, size=(env.T, env.N))
        out.append(achievable_rate(phases, Hs, env))
    return np.array(out)
