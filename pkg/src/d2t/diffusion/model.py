"""Guided noise prediction, training step and the reverse sampler.

Two training modes:

* paper-literal (default): every step evaluates the net with the pilot
  condition and with the learned null token, mixes them with weight ``eta`` and
  regresses the mixture onto the true noise.
* ``cfg_dropout``: standard classifier-free guidance; the condition is replaced
  by the null token with probability ``dropout_prob`` and mixing only happens at
  sampling time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from ..nn import NamedTensorStore
from .schedule import DiffusionSchedule, build_schedule, forward_noise_closed
from .unet import ConditionalUNet1d, UNetConfig
from .vectorize import channel_to_vector, vector_to_channel

NoiseNet = Callable[..., torch.Tensor]


class SamplerDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 0.8
    cfg_dropout: bool = False
    dropout_prob: float = 0.1

    def __post_init__(self):
        if not np.isfinite(self.eta):
            raise ValueError("guidance coefficient must be finite")


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, eta: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    if eta == 1:
        return eps_cond
    if eta == 0:
        return eps_uncond
    return eta * eps_cond + (1 - eta) * eps_uncond


def predict_noise(
    net: NoiseNet,
    x_k: torch.Tensor,
    k: torch.Tensor,
    cond: Optional[torch.Tensor],
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """eps_theta(x_k, k, y); ``cond=None`` selects the null condition."""
    k = torch.as_tensor(k, dtype=torch.long)
    if k.ndim == 0:
        k = k.expand(x_k.shape[0])
    if int(k.min()) < 0 or int(k.max()) >= schedule.K:
        raise IndexError(f"diffusion step outside [0, {schedule.K})")
    out = net(x_k, k, cond)
    if out.shape != x_k.shape:
        raise ValueError(f"noise net returned shape {tuple(out.shape)} for input {tuple(x_k.shape)}")
    return out


def _both_paths(net: NoiseNet, x_k, k, cond, eta: float) -> torch.Tensor:
    """Guided prediction; skips the pass whose weight is zero."""
    if eta == 1:
        return net(x_k, k, cond)
    if eta == 0:
        return net(x_k, k, None)
    b = x_k.shape[0]
    use_null = torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)])
    out = net(torch.cat([x_k, x_k]), torch.cat([k, k]), torch.cat([cond, cond]), use_null)
    return guided_noise(out[:b], out[b:], eta)


def dm_loss(
    net: NoiseNet,
    x0: torch.Tensor,
    cond: torch.Tensor,
    schedule: DiffusionSchedule,
    guidance: GuidanceConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    """Batch mean of ||eps - eps_tilde||^2 at uniformly drawn steps."""
    b = x0.shape[0]
    k = torch.randint(0, schedule.K, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_k = forward_noise_closed(x0, k.numpy(), eps, schedule)
    if guidance.cfg_dropout:
        drop = torch.rand(b, generator=generator) < guidance.dropout_prob
        pred = net(x_k, k, cond, drop)
    else:
        pred = _both_paths(net, x_k, k, cond, guidance.eta)
    return (eps - pred).pow(2).sum(dim=-1).mean()


def dm_train_step(
    net: NoiseNet,
    x0: torch.Tensor,
    cond: torch.Tensor,
    schedule: DiffusionSchedule,
    guidance: GuidanceConfig,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss = dm_loss(net, x0, cond, schedule, guidance, generator)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def reverse_sample(
    net: NoiseNet,
    cond: Optional[torch.Tensor],
    schedule: DiffusionSchedule,
    eta: float,
    generator: torch.Generator,
    shape: tuple[int, int],
    x_init: Optional[torch.Tensor] = None,
    stochastic: bool = True,
    dtype=torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from x_K ~ N(0, I) down to x_0.

    x <- (x - beta_k / sqrt(1 - abar_k) * eps_tilde) / sqrt(1 - beta_k) + sqrt(Sigma_k) z,
    with no noise added at the last step (k = 0). ``cond=None`` samples
    unconditionally (eta is ignored).
    """
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_init is None else x_init.clone().to(dtype)
    betas, abar, var = schedule.betas, schedule.alpha_bars, schedule.posterior_variance
    b = shape[0]
    for k in range(schedule.K - 1, -1, -1):
        kk = torch.full((b,), k, dtype=torch.long)
        eps = net(x, kk, None) if cond is None else _both_paths(net, x, kk, cond, eta)
        x = (x - (betas[k] / np.sqrt(1.0 - abar[k])) * eps) / np.sqrt(1.0 - betas[k])
        if stochastic and k > 0:
            x = x + np.sqrt(var[k]) * torch.randn(shape, generator=generator, dtype=dtype)
        if not torch.isfinite(x).all():
            raise SamplerDivergedError(f"non-finite latent at diffusion step {k}; check the schedule or the network")
    return x


class ChannelDiffusion:
    """Pilot-conditioned generator of cascaded channels (U-Net + schedule + scales)."""

    def __init__(
        self,
        N: int,
        M: int,
        n_pilots: int,
        schedule: Optional[DiffusionSchedule] = None,
        unet: UNetConfig = UNetConfig(),
        guidance: GuidanceConfig = GuidanceConfig(),
        norm_scale: float = 1.0,
        cond_scale: float = 1.0,
        dtype=torch.float32,
    ):
        self.N, self.M, self.n_pilots = N, M, n_pilots
        self.schedule = schedule or build_schedule()
        self.unet_config, self.guidance = unet, guidance
        self.norm_scale, self.cond_scale = float(norm_scale), float(cond_scale)
        self.dtype = dtype
        self.net = ConditionalUNet1d(2 * N * M, 2 * n_pilots, unet).to(dtype)

    def fit_normalization(self, Hs: np.ndarray, ys: np.ndarray) -> None:
        x = channel_to_vector(Hs)
        self.norm_scale = float(np.sqrt(np.mean(x**2)))
        self.cond_scale = float(np.sqrt(np.mean(np.asarray(ys) ** 2)))

    def encode(self, Hs: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(channel_to_vector(Hs) / self.norm_scale, dtype=self.dtype)

    def encode_cond(self, ys: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(ys, dtype=np.float64) / self.cond_scale, dtype=self.dtype)

    def decode(self, x: torch.Tensor) -> np.ndarray:
        return vector_to_channel(x.detach().to(torch.float64).numpy() * self.norm_scale, self.N, self.M)

    def loss(self, Hs, ys, generator) -> torch.Tensor:
        return dm_loss(self.net, self.encode(Hs), self.encode_cond(ys), self.schedule, self.guidance, generator)

    def train_step(self, Hs, ys, optimizer, generator) -> float:
        return dm_train_step(
            self.net, self.encode(Hs), self.encode_cond(ys), self.schedule, self.guidance, optimizer, generator
        )

    def sample(
        self,
        ys: Optional[np.ndarray],
        generator: torch.Generator,
        count: Optional[int] = None,
        eta: Optional[float] = None,
    ) -> np.ndarray:
        """Channels (B, N, M) given pilots ``ys`` (B, 2 N_p); ``ys=None`` -> unconditional."""
        was_training = self.net.training
        self.net.eval()
        try:
            cond = None if ys is None else self.encode_cond(ys)
            b = count if cond is None else cond.shape[0]
            x = reverse_sample(
                self.net,
                cond,
                self.schedule,
                self.guidance.eta if eta is None else eta,
                generator,
                (b, 2 * self.N * self.M),
                dtype=self.dtype,
            )
        finally:
            self.net.train(was_training)
        return self.decode(x)

    # -- checkpointing -----------------------------------------------------

    def to_store(self) -> NamedTensorStore:
        meta = {
            "kind": "diffusion",
            "N": self.N,
            "M": self.M,
            "n_pilots": self.n_pilots,
            "norm_scale": self.norm_scale,
            "cond_scale": self.cond_scale,
            "guidance": asdict(self.guidance),
            "unet": asdict(self.unet_config),
            "dtype": str(self.dtype).removeprefix("torch."),
        }
        store = NamedTensorStore.from_module(self.net, prefix="net.", meta=meta)
        store["schedule.betas"] = self.schedule.betas
        return store

    @classmethod
    def from_store(cls, store: NamedTensorStore) -> "ChannelDiffusion":
        m = store.meta
        unet = dict(m["unet"])
        unet["width_mults"] = tuple(unet["width_mults"])
        model = cls(
            m["N"],
            m["M"],
            m["n_pilots"],
            schedule=DiffusionSchedule(store["schedule.betas"]),
            unet=UNetConfig(**unet),
            guidance=GuidanceConfig(**m["guidance"]),
            norm_scale=m["norm_scale"],
            cond_scale=m["cond_scale"],
            dtype=getattr(torch, m["dtype"]),
        )
        store.load_into(model.net, prefix="net.")
        return model
