"""Reverse-mode gradients and an independent central-difference oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def backprop(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss``; parameters it does not reach get zeros."""
    if loss.numel() != 1:
        raise ValueError("backprop needs a scalar loss")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@torch.no_grad()
def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d fn() / d tensor by perturbing each element of ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the largest gradient magnitude (at least ``floor``)."""
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / scale


def gradcheck(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences over ``tensors``.

    Each tensor's error is scaled by its own largest gradient, floored at 1e-3 of the
    largest gradient over all tensors. Gradients that vanish by symmetry (a key bias
    under softmax, say) would otherwise compare finite-difference noise against zero.
    """
    loss = fn()
    analytic = [a.detach() for a in backprop(loss, tensors)]
    numeric = [central_difference(fn, t.data, eps) for t in tensors]
    top = max([float(g.abs().max()) for g in analytic + numeric if g.numel()] + [1e-8])
    return max((relative_error(a, n, 1e-3 * top) for a, n in zip(analytic, numeric)), default=0.0)
