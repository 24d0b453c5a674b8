"""Central finite-difference gradient checking, independent of autograd."""

import torch


def finite_difference_gradients(loss_fn, params, eps: float = 1e-5):
    """Numerically differentiate loss_fn w.r.t. each tensor in params.

    loss_fn takes no arguments and recomputes the scalar loss from the current
    parameter values; params are perturbed in place (and restored) one
    coordinate at a time. Run this on float64 tensors.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                gflat[idx] = (up - down) / (2.0 * eps)
            grads.append(grad)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def max_gradient_error(loss_fn, params, eps: float = 1e-5) -> float:
    """Worst per-tensor relative error between autograd and central differences."""
    params = list(params)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params)
    numeric = finite_difference_gradients(loss_fn, params, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
