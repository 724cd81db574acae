from __future__ import annotations

from collections.abc import Mapping

import torch


class NoRecordedGraphError(RuntimeError):
    pass


def backward(
    output: torch.Tensor,
    seed_grad: torch.Tensor,
    wrt: Mapping[str, torch.Tensor],
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``<seed_grad, output>`` w.r.t. each tensor in ``wrt``.

    Tensors used several times in the forward pass receive the sum of their
    contributions. Tensors that did not take part get a zero gradient.
    """
    if output.grad_fn is None and not output.requires_grad:
        raise NoRecordedGraphError("backward called on a tensor with no recorded forward graph")
    if seed_grad.shape != output.shape:
        raise ValueError(f"seed gradient shape {tuple(seed_grad.shape)} != output shape {tuple(output.shape)}")
    names = list(wrt)
    grads = torch.autograd.grad(
        output, [wrt[n] for n in names], grad_outputs=seed_grad, allow_unused=True, retain_graph=True
    )
    return {n: (torch.zeros_like(wrt[n]) if g is None else g) for n, g in zip(names, grads)}
