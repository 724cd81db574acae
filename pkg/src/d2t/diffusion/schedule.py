"""Linear-beta noise schedule and forward noising.

Index convention (0-based, k = 0..K-1): ``alpha_bar[k] = prod_{i<=k} (1 - beta[i])``
is the signal fraction after applying steps 0..k. The network is always fed the
latent that has been noised through step k together with the index k, which is
exactly DDPM's x_{k+1} / t = k+1 pairing shifted to zero-based arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("betas must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", b)

    @property
    def K(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        """alpha_bar[k-1] with alpha_bar[-1] := 1."""
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        """Sigma_k = (1 - alpha_bar[k-1]) / (1 - alpha_bar[k]) * beta_k; Sigma_0 = 0."""
        return (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars) * self.betas


def build_schedule(K: int = 500, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return DiffusionSchedule(np.linspace(beta_min, beta_max, K))


def noise_step(x: np.ndarray, beta: float, eps: np.ndarray) -> np.ndarray:
    """sqrt(1 - beta) x + sqrt(beta) eps."""
    return np.sqrt(1.0 - beta) * x + np.sqrt(beta) * eps


def forward_noise_step(x: np.ndarray, k: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward step k of the chain (latent after step k-1 -> latent after step k)."""
    if not 0 <= k < schedule.K:
        raise IndexError(f"step {k} outside [0, {schedule.K})")
    return noise_step(x, schedule.betas[k], eps)


def forward_noise_closed(x0, k, eps, schedule: DiffusionSchedule):
    """Latent after steps 0..k in one shot: sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    ``k`` may be an integer array broadcasting against the leading axes of x0;
    works for numpy arrays and torch tensors alike.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr >= schedule.K):
        raise IndexError(f"step index outside [0, {schedule.K})")
    abar = schedule.alpha_bars[k_arr]
    if hasattr(x0, "new_tensor"):
        abar = x0.new_tensor(abar)
        a, s = abar.sqrt(), (1 - abar).sqrt()
    else:
        a, s = np.sqrt(abar), np.sqrt(1 - abar)
    if np.ndim(k_arr) > 0:
        a = a.reshape(*a.shape, *([1] * (x0.ndim - a.ndim)))
        s = s.reshape(*s.shape, *([1] * (x0.ndim - s.ndim)))
    return a * x0 + s * eps
