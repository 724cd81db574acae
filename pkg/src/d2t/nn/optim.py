from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Optional

import torch


@dataclass
class AdamWState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(
    state: AdamWState,
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
) -> tuple[dict[str, torch.Tensor], AdamWState]:
    """One AdamW update with decoupled weight decay; returns new params, mutates ``state``."""
    beta1, beta2 = state.betas
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.exp_avg.get(name, torch.zeros_like(p))
        v = state.exp_avg_sq.get(name, torch.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.exp_avg[name], state.exp_avg_sq[name] = m, v
        decayed = p * (1 - state.lr * state.weight_decay)
        out[name] = decayed - state.lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
    return out, state


class AdamW(torch.optim.Optimizer):
    """AdamW (Loshchilov & Hutter) with the weight decay applied before the Adam step."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)

                p.mul_(1 - group["lr"] * group["weight_decay"])
                denom = (exp_avg_sq / (1 - beta2**t)).sqrt_().add_(group["eps"])
                p.addcdiv_(exp_avg, denom, value=-group["lr"] / (1 - beta1**t))
        return loss
