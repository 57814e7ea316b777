"""Central finite-difference gradient checking at float64."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import torch


def numerical_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """d fn() / d tensor by central differences, perturbing ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish."""
    denom = max(analytic.norm().item(), numeric.norm().item())
    if denom == 0.0:
        return 0.0
    return (analytic - numeric).norm().item() / denom


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Dict[str, torch.Tensor], h: float = 1e-6) -> Dict[str, float]:
    """Relative error between autograd and finite differences for each named tensor."""
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    errors = {}
    for (name, t), g in zip(tensors.items(), analytic):
        g = torch.zeros_like(t) if g is None else g
        errors[name] = relative_error(g, numerical_grad(fn, t, h))
    return errors


def module_tensors(module: torch.nn.Module, names: Sequence[str] = ()) -> Dict[str, torch.Tensor]:
    params = dict(module.named_parameters())
    return {n: params[n] for n in names} if names else params
