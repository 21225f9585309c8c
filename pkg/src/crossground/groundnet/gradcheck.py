"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

import copy
from typing import Callable

import numpy as np
import torch

from crossground.groundnet.model import loss_total


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def grad_check(
    model,
    batch,
    eps: float = 1e-5,
    loss_fn: Callable | None = None,
    max_entries: int | None = 48,
    seed: int = 0,
    corrupt: Callable | None = None,
) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients with central differences for every parameter tensor.

    Runs on a float64 copy of ``model``.  For tensors larger than
    ``max_entries`` a fixed random subset of entries is checked.  ``corrupt``
    may rewrite the analytic gradient dict (used to test the checker).
    Returns ``(max relative error, per-tensor errors)``.
    """
    model = copy.deepcopy(model).double()
    model.eval()
    batch = batch.to(torch.float64) if hasattr(batch, "to") else batch
    if loss_fn is None:
        def loss_fn(mdl, b):
            return loss_total(mdl(b), b, mdl.config)[0]

    params = dict(model.named_parameters())
    model.zero_grad()
    loss = loss_fn(model, batch)
    loss.backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
    if corrupt is not None:
        analytic = corrupt(analytic)

    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_entries is None or n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn(model, batch).item()
                flat[i] = orig - eps
                down = loss_fn(model, batch).item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1).numpy()[idx]
            errors[name] = relative_error(a, numeric)
    return max(errors.values()), errors
