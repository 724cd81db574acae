"""1-D conditional U-Net predicting the noise added to a channel vector.

The 2NM-long vector is viewed as two channels (real, imaginary) over NM
positions. Six encoder blocks halve the length while it is even and > 1
(stride 1 afterwards), six decoder blocks mirror them with skip connections.
Each block is conv1d + group-norm + SiLU with a linear projection of the
step + condition embedding added per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..nn import Activation, Conv1d, Dense, GroupNorm


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 6
    base_width: int = 32
    width_mults: tuple[int, ...] = (1, 1, 2, 2, 4, 4)
    emb_width: int = 512
    step_freqs: int = 64
    kernel: int = 3
    groups: int = 8

    def __post_init__(self):
        if len(self.width_mults) != self.depth:
            raise ValueError("need one width multiplier per encoder block")


def sinusoidal_embedding(k: torch.Tensor, n_freqs: int, dtype=torch.float32) -> torch.Tensor:
    freqs = torch.exp(-math.log(10000.0) * torch.arange(n_freqs, dtype=dtype) / n_freqs)
    angles = k.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_width: int, kernel: int, groups: int):
        super().__init__()
        g = min(groups, c_out)
        self.conv1 = Conv1d(c_in, c_out, kernel)
        self.norm1 = GroupNorm(g, c_out)
        self.emb_proj = Dense(emb_width, c_out)
        self.conv2 = Conv1d(c_out, c_out, kernel)
        self.norm2 = GroupNorm(g, c_out)
        self.act = Activation("silu")
        self.skip = Conv1d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(self.act(emb))[:, :, None]
        h = self.act(self.norm2(self.conv2(h)))
        return h + (x if self.skip is None else self.skip(x))


class ConditionalUNet1d(nn.Module):
    def __init__(self, data_dim: int, cond_dim: int, config: UNetConfig = UNetConfig()):
        super().__init__()
        if data_dim % 2:
            raise ValueError("data vector must hold real and imaginary halves")
        self.data_dim, self.cond_dim, self.config = data_dim, cond_dim, config
        length = data_dim // 2
        e = config.emb_width

        self.step_mlp = nn.Sequential(Dense(2 * config.step_freqs, e), Activation("silu"), Dense(e, e))
        self.cond_mlp = nn.Sequential(Dense(cond_dim, e), Activation("silu"), Dense(e, e))
        self.null_cond = nn.Parameter(torch.randn(e) * 0.02)

        widths = [config.base_width * m for m in config.width_mults]
        self.strides = []
        for _ in range(config.depth):
            s = 2 if (length > 1 and length % 2 == 0) else 1
            self.strides.append(s)
            length //= s

        self.in_conv = Conv1d(2, widths[0], config.kernel)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        c = widths[0]
        for w, s in zip(widths, self.strides):
            self.down_blocks.append(ResBlock(c, w, e, config.kernel, config.groups))
            self.downsamplers.append(Conv1d(w, w, config.kernel, stride=2) if s == 2 else nn.Identity())
            c = w
        self.mid = ResBlock(c, c, e, config.kernel, config.groups)
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.up_blocks.append(ResBlock(c + w, w, e, config.kernel, config.groups))
            c = w
        self.out_norm = GroupNorm(min(config.groups, c), c)
        self.out_conv = Conv1d(c, 2, config.kernel)

    def embed(self, k: torch.Tensor, cond: torch.Tensor | None, use_null: torch.Tensor | None = None) -> torch.Tensor:
        dtype = self.null_cond.dtype
        step = self.step_mlp(sinusoidal_embedding(k, self.config.step_freqs, dtype))
        null = self.null_cond.expand(k.shape[0], -1)
        if cond is None:
            return step + null
        c = self.cond_mlp(cond.to(dtype))
        if use_null is not None:
            c = torch.where(use_null[:, None], null, c)
        return step + c

    def forward(
        self,
        x: torch.Tensor,
        k: torch.Tensor,
        cond: torch.Tensor | None = None,
        use_null: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """x (B, 2NM), k (B,) ints, cond (B, cond_dim) or None for the null condition."""
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ValueError(f"expected x of shape (B, {self.data_dim}), got {tuple(x.shape)}")
        b = x.shape[0]
        emb = self.embed(k, cond, use_null)
        h = self.in_conv(x.reshape(b, 2, -1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for block, s in zip(self.up_blocks, reversed(self.strides)):
            skip = skips.pop()
            if s == 2:
                h = F.interpolate(h, size=skip.shape[-1], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.reshape(b, -1)
