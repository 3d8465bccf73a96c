"""Central-finite-difference gradient oracle shared by the test suite.

The comparison criterion is |fd - analytic| <= atol + rtol * max(|fd|,
|analytic|): rtol carries the intended relative tolerance while atol
absorbs finite-difference rounding noise on near-zero gradients, where a
bare relative error is undefined. The oracle only evaluates the loss
function at perturbed parameter values; it never touches autograd.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Iterable[tuple[str, torch.nn.Parameter]],
    eps: float,
    rtol: float,
    atol: float,
    max_slots_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[int, float]:
    """Compare autograd gradients against central differences.

    Backpropagates ``loss_fn`` once, then perturbs each selected parameter
    slot by +-eps and re-evaluates. Checks every slot unless
    ``max_slots_per_tensor`` limits sampling. Returns (slots checked,
    worst normalized error); raises AssertionError on the first violation.
    """
    named_params = list(named_params)
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()

    checked = 0
    worst = 0.0
    for name, param in named_params:
        grad = (
            param.grad.detach().reshape(-1)
            if param.grad is not None
            else torch.zeros(param.numel(), dtype=param.dtype)
        )
        flat = param.detach().reshape(-1)
        if max_slots_per_tensor is None or flat.numel() <= max_slots_per_tensor:
            slots = range(flat.numel())
        else:
            assert rng is not None, "sampling requires an rng"
            slots = rng.choice(flat.numel(), size=max_slots_per_tensor, replace=False)
        for slot in slots:
            original = flat[slot].item()
            with torch.no_grad():
                flat[slot] = original + eps
                up = float(loss_fn())
                flat[slot] = original - eps
                down = float(loss_fn())
                flat[slot] = original
            fd = (up - down) / (2.0 * eps)
            analytic = grad[slot].item()
            err = abs(fd - analytic)
            bound = atol + rtol * max(abs(fd), abs(analytic))
            normalized = err / bound if bound > 0 else float("inf")
            worst = max(worst, normalized)
            assert err <= bound, (
                f"{name}[{slot}]: fd={fd:.6e} analytic={analytic:.6e} "
                f"err={err:.3e} > atol {atol:.1e} + rtol {rtol:.1e}"
            )
            checked += 1
    return checked, worst
