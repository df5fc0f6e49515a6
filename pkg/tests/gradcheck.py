"""Central finite-difference gradient checking against autograd (float64)."""

from __future__ import annotations

import torch


def autograd_gradients(model, loss_fn) -> list[torch.Tensor]:
    params = [p for p in model.parameters()]
    loss = loss_fn(model)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]


def finite_difference_gradients(model, loss_fn, h: float = 1e-5) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for p in model.parameters():
            g = torch.zeros_like(p)
            flat = p.data.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn(model))
                flat[i] = orig - h
                down = float(loss_fn(model))
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def relative_gradient_error(model, loss_fn, h: float = 1e-5) -> float:
    """Norm-wise relative error between autograd and central differences."""
    auto = torch.cat([g.reshape(-1) for g in autograd_gradients(model, loss_fn)])
    fd = torch.cat([g.reshape(-1) for g in finite_difference_gradients(model, loss_fn, h)])
    denom = max(auto.norm().item(), fd.norm().item(), 1e-12)
    return (auto - fd).norm().item() / denom
