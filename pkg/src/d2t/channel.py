"""IRS-assisted MISO link: Rician channels, cascading, MRT, rate and pilots.

Conventions: ``G`` is N x M (BS -> IRS), ``h`` has length N (IRS -> user) and the
cascaded channel is ``H = diag(h^H) G``. A phase-shift action is a vector of N
angles; the reflection vector is ``exp(1j * angles)``. Powers are stored in mW.
Functions accept leading batch dimensions where it is cheap to do so.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np


class DegenerateChannelError(ValueError):
    pass


def dbm_to_mw(dbm: float) -> float:
    return float(10.0 ** (dbm / 10.0))


def db_to_linear(db: float) -> float:
    return float(10.0 ** (db / 10.0))


@dataclass(frozen=True)
class EnvConfig:
    M: int = 4
    N: int = 16
    P: float = dbm_to_mw(5.0)
    sigma2: float = dbm_to_mw(-90.0)
    kappa1: float = 10.0
    kappa2: float = 10.0
    xi1: float = 2.2
    xi2: float = 2.8
    d0: float = 1.0
    d1: float = 50.0
    d2: float = 3.0
    L0_db: float = -30.0
    T: int = 20
    # (BS departure, IRS arrival, IRS departure towards the user); None -> drawn from seed
    los_angles: Optional[tuple[float, float, float]] = None
    seed: int = 0
    pilot_seed: int = 2024

    def __post_init__(self):
        if self.M < 1 or self.N < 1 or self.T < 1:
            raise ValueError("M, N and T must be >= 1")
        if not (self.P > 0 and self.sigma2 > 0):
            raise ValueError("transmit and noise power must be positive")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("Rician factors must be non-negative")
        if not (self.d0 > 0 and self.d1 >= self.d0 and self.d2 >= self.d0):
            raise ValueError("distances must satisfy d1, d2 >= d0 > 0")
        if self.los_angles is None:
            rng = np.random.default_rng([self.seed, 0x105])
            angles = tuple(float(a) for a in rng.uniform(-np.pi / 3, np.pi / 3, size=3))
            object.__setattr__(self, "los_angles", angles)
        else:
            object.__setattr__(self, "los_angles", tuple(float(a) for a in self.los_angles))
            if len(self.los_angles) != 3:
                raise ValueError("los_angles needs three entries")

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        """Build from file-style keys; ``P_dbm``/``sigma2_dbm`` are converted to mW here."""
        d = dict(d)
        if "seed" not in d:
            raise ValueError("environment config requires an explicit seed")
        if "P_dbm" in d:
            d["P"] = dbm_to_mw(d.pop("P_dbm"))
        if "sigma2_dbm" in d:
            d["sigma2"] = dbm_to_mw(d.pop("sigma2_dbm"))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown environment keys: {sorted(unknown)}")
        if d.get("los_angles") is not None:
            d["los_angles"] = tuple(d["los_angles"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["los_angles"] = list(self.los_angles)
        return d

    def with_(self, **changes) -> "EnvConfig":
        return replace(self, **changes)

    @property
    def n_pilots(self) -> int:
        return 2 * min(self.N, self.M) + 2


def path_loss_linear(xi: float, d: float, config: EnvConfig) -> float:
    if d < config.d0:
        raise ValueError(f"distance {d} is below the reference distance {config.d0}")
    return db_to_linear(config.L0_db - 10.0 * xi * np.log10(d / config.d0))


def ula_steering(n: int, angle: float) -> np.ndarray:
    """Half-wavelength uniform linear array response, unit-modulus entries."""
    return np.exp(1j * np.pi * np.arange(n) * np.sin(angle))


def los_components(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    theta_d, theta_a, theta_u = config.los_angles
    G_bar = np.outer(ula_steering(config.N, theta_a), ula_steering(config.M, theta_d).conj())
    h_bar = ula_steering(config.N, theta_u)
    return G_bar, h_bar


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric complex Gaussian entries with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_rician(config: EnvConfig, link: str, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw G (``link="bs-irs"``) or h (``link="irs-user"``); ``size`` adds a batch axis."""
    G_bar, h_bar = los_components(config)
    if link == "bs-irs":
        los, kappa, gain = G_bar, config.kappa1, path_loss_linear(config.xi1, config.d1, config)
    elif link == "irs-user":
        los, kappa, gain = h_bar, config.kappa2, path_loss_linear(config.xi2, config.d2, config)
    else:
        raise ValueError(f"unknown link {link!r}")
    shape = los.shape if size is None else (size, *los.shape)
    scatter = complex_normal(rng, shape)
    return np.sqrt(gain) * (np.sqrt(kappa / (1 + kappa)) * los + np.sqrt(1 / (1 + kappa)) * scatter)


def cascade(G: np.ndarray, h: np.ndarray) -> np.ndarray:
    """H[..., n, m] = conj(h[..., n]) * G[..., n, m]."""
    if G.shape[-2] != h.shape[-1]:
        raise ValueError(f"G has {G.shape[-2]} rows but h has {h.shape[-1]} entries")
    return np.conj(h)[..., :, None] * G


@dataclass(frozen=True)
class ChannelRealization:
    G: np.ndarray
    h: np.ndarray
    H: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.H is None:
            object.__setattr__(self, "H", cascade(self.G, self.h))


def reflection(phases: np.ndarray) -> np.ndarray:
    return np.exp(1j * np.asarray(phases, dtype=float))


def wrap_angle(phases: np.ndarray) -> np.ndarray:
    """Map angles to [-pi, pi)."""
    return (np.asarray(phases) + np.pi) % (2 * np.pi) - np.pi


def effective_channel(phases: np.ndarray, H: np.ndarray) -> np.ndarray:
    """phi^T H, shape (..., M)."""
    return np.einsum("...n,...nm->...m", reflection(phases), H)


def channel_gain(phases: np.ndarray, H: np.ndarray) -> np.ndarray:
    """||phi^T H||^2."""
    u = effective_channel(phases, H)
    return np.sum(np.abs(u) ** 2, axis=-1)


def mrt_precoder(phases: np.ndarray, H: np.ndarray, P: float) -> np.ndarray:
    u = effective_channel(phases, H)
    norm = np.linalg.norm(u)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateChannelError("degenerate channel: phi^T H is zero")
    return np.sqrt(P) * u.conj() / norm


def rate_with_precoder(phases: np.ndarray, H: np.ndarray, f: np.ndarray, config: EnvConfig) -> float:
    u = effective_channel(phases, H)
    return float(np.log2(1 + np.abs(u @ f) ** 2 / config.sigma2))


def achievable_rate(phases: np.ndarray, H: np.ndarray, config: EnvConfig) -> np.ndarray:
    """log2(1 + P ||phi^T H||^2 / sigma^2), the rate under MRT (bits/s/Hz)."""
    return np.log2(1 + config.P * channel_gain(phases, H) / config.sigma2)


@dataclass(frozen=True)
class PilotBook:
    """Fixed probe configurations: IRS phases (N_p x N) and BS precoders (N_p x M)."""

    phases: np.ndarray
    precoders: np.ndarray

    @classmethod
    def from_config(cls, config: EnvConfig) -> "PilotBook":
        n_p = config.n_pilots
        rng = np.random.default_rng([config.pilot_seed, config.N, config.M])
        phases = rng.uniform(-np.pi, np.pi, size=(n_p, config.N))
        precoders = np.zeros((n_p, config.M), dtype=complex)
        precoders[np.arange(n_p), np.arange(n_p) % config.M] = np.sqrt(config.P)
        return cls(phases, precoders)

    @property
    def n_pilots(self) -> int:
        return self.phases.shape[0]


@dataclass(frozen=True)
class PilotObservation:
    y: np.ndarray
    pilot_book: PilotBook


def noiseless_pilots(H: np.ndarray, book: PilotBook) -> np.ndarray:
    """Complex receptions (phi_p^T H) f_p, shape (..., N_p)."""
    eff = np.einsum("pn,...nm->...pm", reflection(book.phases), H)
    return np.einsum("...pm,pm->...p", eff, book.precoders)


def stack_complex(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag], axis=-1)


def pilot_observe(H: np.ndarray, config: EnvConfig, rng: Optional[np.random.Generator], book: Optional[PilotBook] = None) -> np.ndarray:
    """Real vector [Re y, Im y] of length 2 N_p (batched over leading axes of H).

    ``rng=None`` gives the noiseless receptions.
    """
    book = book or PilotBook.from_config(config)
    y = noiseless_pilots(H, book)
    if rng is not None:
        y = y + np.sqrt(config.sigma2) * complex_normal(rng, y.shape)
    return stack_complex(y)


# Rewards live on a dyadic grid so that return-to-go sums and differences are
# exact in float64 (|R| < 2**20 keeps every partial sum representable).
REWARD_QUANTUM = 2.0**-32


def quantize_reward(r):
    return np.round(np.asarray(r, dtype=np.float64) / REWARD_QUANTUM) * REWARD_QUANTUM


@dataclass
class StepResult:
    reward: float
    channel: Optional[ChannelRealization]
    pilots: Optional[np.ndarray]
    done: bool


class IRSEnv:
    """Episode simulator: channels are i.i.d. across slots, rewards are MRT rates.

    ``reset`` draws the first slot; ``step`` scores the action on the current
    slot and advances to the next one.
    """

    def __init__(self, config: EnvConfig, episode: int = 0):
        self.config = config
        self.episode = episode
        self.book = PilotBook.from_config(config)
        self.rng = episode_rng(config, episode)
        self.t = 0
        self.channel: Optional[ChannelRealization] = None
        self.pilots: Optional[np.ndarray] = None

    def _draw(self) -> None:
        G = sample_rician(self.config, "bs-irs", self.rng)
        h = sample_rician(self.config, "irs-user", self.rng)
        self.channel = ChannelRealization(G, h)
        self.pilots = pilot_observe(self.channel.H, self.config, self.rng, self.book)

    def reset(self) -> tuple[ChannelRealization, np.ndarray]:
        self.t = 0
        self._draw()
        return self.channel, self.pilots

    def step(self, phases: np.ndarray) -> StepResult:
        if self.channel is None:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.config.T:
            raise RuntimeError("episode is over")
        phases = np.asarray(phases, dtype=float)
        if phases.shape != (self.config.N,):
            raise ValueError(f"action must have {self.config.N} angles, got shape {phases.shape}")
        reward = float(quantize_reward(achievable_rate(phases, self.channel.H, self.config)))
        self.t += 1
        done = self.t >= self.config.T
        if done:
            self.channel, self.pilots = None, None
        else:
            self._draw()
        return StepResult(reward, self.channel, self.pilots, done)


def episode_rng(config: EnvConfig, episode: int) -> np.random.Generator:
    """Independent stream per (environment seed, episode index)."""
    return np.random.default_rng(np.random.SeedSequence([config.seed, 0xE2, episode]))


def roll_channels(config: EnvConfig, episode: int) -> tuple[np.ndarray, np.ndarray]:
    """All T slots of one episode: channels (T, N, M) and pilots (T, 2 N_p).

    Identical to what ``IRSEnv(config, episode)`` serves slot by slot.
    """
    return sample_channels(config, episode_rng(config, episode), config.T)


def sample_channels(config: EnvConfig, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch of cascaded channels (count, N, M) with their noisy pilots (count, 2 N_p).

    Draw order matches ``count`` consecutive ``IRSEnv`` slots sharing ``rng``.
    """
    book = PilotBook.from_config(config)
    Hs, ys = [], []
    for _ in range(count):
        G = sample_rician(config, "bs-irs", rng)
        h = sample_rician(config, "irs-user", rng)
        H = cascade(G, h)
        Hs.append(H)
        ys.append(pilot_observe(H, config, rng, book))
    return np.stack(Hs), np.stack(ys)
