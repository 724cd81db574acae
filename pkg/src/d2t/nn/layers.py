"""Layer primitives shared by the channel U-Net and the decision transformer.

Every layer is a plain ``torch.nn.Module``; gradients come from torch autograd.
``LayerSpec`` + ``build_layer`` give a declarative way to instantiate one layer
kind, which is what the gradient suite iterates over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

LAYER_KINDS = (
    "dense",
    "layer-norm",
    "group-norm",
    "causal-self-attention",
    "conv1d",
    "embedding",
    "activation",
)


class LayerShapeError(ValueError):
    """Raised when an input does not fit the layer it is fed to."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        h = self.hyper
        if self.kind == "causal-self-attention" and h["width"] % h["heads"] != 0:
            raise ValueError(f"head count {h['heads']} does not divide width {h['width']}")
        if self.kind == "conv1d" and h.get("kernel", 3) % 2 == 0:
            raise ValueError("conv1d kernel size must be odd")
        if self.kind == "group-norm" and h["channels"] % h["groups"] != 0:
            raise ValueError("group count must divide channel count")


def _check_last_dim(layer: str, x: torch.Tensor, expected: int) -> None:
    if x.shape[-1] != expected:
        raise LayerShapeError(layer, f"expected last dim {expected}, got {tuple(x.shape)}")


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim("dense", x, self.d_in)
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.width, self.eps = width, eps
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim("layer-norm", x, self.width)
        mean = x.mean(dim=-1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.gain + self.bias


class GroupNorm(nn.Module):
    """Group normalisation over (batch, channels, length) feature maps."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups, self.channels, self.eps = groups, channels, eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise LayerShapeError("group-norm", f"expected (B, {self.channels}, L), got {tuple(x.shape)}")
        b, c, length = x.shape
        g = x.reshape(b, self.groups, -1)
        mean = g.mean(dim=-1, keepdim=True)
        var = (g - mean).pow(2).mean(dim=-1, keepdim=True)
        g = (g - mean) / torch.sqrt(var + self.eps)
        return g.reshape(b, c, length) * self.gain[:, None] + self.bias[:, None]


class Conv1d(nn.Module):
    """Odd-kernel 1-D convolution with 'same' padding (length kept at stride 1)."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("conv1d kernel size must be odd")
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(c_out).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise LayerShapeError("conv1d", f"expected (B, {self.c_in}, L), got {tuple(x.shape)}")
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.kernel // 2)


class Embedding(nn.Module):
    def __init__(self, vocab: int, width: int):
        super().__init__()
        self.vocab, self.width = vocab, width
        self.weight = nn.Parameter(torch.randn(vocab, width) * 0.02)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        if idx.dtype not in (torch.int32, torch.int64):
            raise LayerShapeError("embedding", f"indices must be integer, got {idx.dtype}")
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.vocab):
            raise LayerShapeError("embedding", f"index out of range [0, {self.vocab})")
        return self.weight[idx]


_ACTIVATIONS = {
    "silu": F.silu,
    "gelu": lambda x: F.gelu(x, approximate="tanh"),
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class Activation(nn.Module):
    def __init__(self, name: str = "silu"):
        super().__init__()
        if name not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ACTIVATIONS[self.name](x)


def stable_softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = scores - scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention; position t only sees positions <= t."""

    def __init__(self, width: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"head count {heads} does not divide width {width}")
        self.width, self.heads = width, heads
        self.d_head = width // heads
        self.q_proj = Dense(width, width)
        self.k_proj = Dense(width, width)
        self.v_proj = Dense(width, width)
        self.out_proj = Dense(width, width)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim < 2:
            raise LayerShapeError("causal-self-attention", f"expected (..., seq, width), got {tuple(x.shape)}")
        _check_last_dim("causal-self-attention", x, self.width)
        seq = x.shape[-2]
        lead = x.shape[:-2]

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(*lead, seq, self.heads, self.d_head).transpose(-3, -2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        mask = torch.ones(seq, seq, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        weights = self.attn_drop(stable_softmax(scores, dim=-1))
        out = (weights @ v).transpose(-3, -2).reshape(*lead, seq, self.width)
        return self.out_proj(out)


def build_layer(spec: LayerSpec) -> nn.Module:
    h = spec.hyper
    if spec.kind == "dense":
        return Dense(h["d_in"], h["d_out"], bias=h.get("bias", True))
    if spec.kind == "layer-norm":
        return LayerNorm(h["width"], eps=h.get("eps", 1e-5))
    if spec.kind == "group-norm":
        return GroupNorm(h["groups"], h["channels"], eps=h.get("eps", 1e-5))
    if spec.kind == "causal-self-attention":
        return CausalSelfAttention(h["width"], h["heads"], dropout=h.get("dropout", 0.0))
    if spec.kind == "conv1d":
        return Conv1d(h["c_in"], h["c_out"], kernel=h.get("kernel", 3), stride=h.get("stride", 1))
    if spec.kind == "embedding":
        return Embedding(h["vocab"], h["width"])
    return Activation(h.get("name", "silu"))


def layer_forward(spec: LayerSpec, params: dict[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Evaluate one layer with explicitly supplied parameters.

    Missing entries in ``params`` fall back to freshly initialised values, so an
    activation (no parameters) can be called with an empty dict.
    """
    layer = build_layer(spec)
    own = dict(layer.named_parameters())
    unknown = set(params) - set(own)
    if unknown:
        raise LayerShapeError(spec.kind, f"unknown parameters {sorted(unknown)}")
    for name, value in params.items():
        if tuple(value.shape) != tuple(own[name].shape):
            raise LayerShapeError(
                spec.kind, f"parameter {name} has shape {tuple(value.shape)}, expected {tuple(own[name].shape)}"
            )
    merged = {**{k: v.to(x.dtype) if x.is_floating_point() else v for k, v in own.items()}, **params}
    return torch.func.functional_call(layer, merged, (x,))
