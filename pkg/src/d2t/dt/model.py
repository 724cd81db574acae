from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from ..nn import Activation, CausalSelfAttention, Dense, Embedding, LayerNorm, NamedTensorStore


@dataclass(frozen=True)
class DTConfig:
    n_layer: int = 3
    width: int = 256
    heads: int = 4
    dropout: float = 0.1
    context: int = 20
    max_timestep: int = 20

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("head count must divide the hidden width")
        if self.context > self.max_timestep:
            raise ValueError("context length cannot exceed the episode length")


class Block(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = CausalSelfAttention(width, heads, dropout)
        self.ln2 = LayerNorm(width)
        self.mlp = nn.Sequential(Dense(width, 4 * width), Activation("gelu"), Dense(4 * width, width))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp(self.ln2(x)))


class DecisionTransformer(nn.Module):
    """GPT-style policy over interleaved (return-to-go, state, action) tokens.

    Actions enter as [cos, sin] of the angles and leave as ``pi * tanh(.)``, so
    every prediction is a valid unit-modulus phase vector. Inputs are expected
    already scaled: states by ``state_scale``, returns by ``rtg_scale``.
    """

    def __init__(self, state_dim: int, n_elements: int, config: DTConfig = DTConfig()):
        super().__init__()
        self.state_dim, self.n_elements, self.config = state_dim, n_elements, config
        w = config.width
        self.embed_return = Dense(1, w)
        self.embed_state = Dense(state_dim, w)
        self.embed_action = Dense(2 * n_elements, w)
        self.embed_timestep = Embedding(config.max_timestep, w)
        self.embed_ln = LayerNorm(w)
        self.drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(Block(w, config.heads, config.dropout) for _ in range(config.n_layer))
        self.ln_f = LayerNorm(w)
        self.action_head = nn.Sequential(Dense(w, w), Activation("gelu"), Dense(w, n_elements))
        self.register_buffer("state_scale", torch.ones(()))
        self.register_buffer("rtg_scale", torch.ones(()))

    def tokenize(
        self,
        returns_to_go: torch.Tensor,
        states: torch.Tensor,
        actions: torch.Tensor,
        timesteps: torch.Tensor,
    ) -> torch.Tensor:
        """(B, w) / (B, w, D) / (B, w, N) / (B, w) -> (B, 3w, width), ordered R, s, a per step."""
        b, w = returns_to_go.shape
        if w > self.config.context:
            raise ValueError(f"window of {w} steps exceeds the context length {self.config.context}")
        pos = self.embed_timestep(timesteps)
        r = self.embed_return(returns_to_go[..., None]) + pos
        s = self.embed_state(states) + pos
        a = self.embed_action(torch.cat([torch.cos(actions), torch.sin(actions)], dim=-1)) + pos
        return torch.stack([r, s, a], dim=2).reshape(b, 3 * w, -1)

    def forward(self, returns_to_go, states, actions, timesteps) -> torch.Tensor:
        """Predicted angles (B, w, N); step t reads the output at its state token."""
        tokens = self.tokenize(returns_to_go, states, actions, timesteps)
        h = self.drop(self.embed_ln(tokens))
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        b, w = returns_to_go.shape
        h_state = h.reshape(b, w, 3, -1)[:, :, 1]
        return math.pi * torch.tanh(self.action_head(h_state))

    def to_store(self, extra_meta: dict | None = None) -> NamedTensorStore:
        meta = {
            "kind": "decision-transformer",
            "state_dim": self.state_dim,
            "n_elements": self.n_elements,
            "config": asdict(self.config),
            **(extra_meta or {}),
        }
        return NamedTensorStore.from_module(self, meta=meta)

    @classmethod
    def from_store(cls, store: NamedTensorStore) -> "DecisionTransformer":
        m = store.meta
        model = cls(m["state_dim"], m["n_elements"], DTConfig(**m["config"]))
        dtype = torch.float64 if store["state_scale"].dtype.itemsize == 8 else torch.float32
        model = model.to(dtype)
        store.load_into(model)
        return model
