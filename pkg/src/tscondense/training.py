"""Plain mini-batch gradient descent over the functional model."""

from __future__ import annotations

import numpy as np
import torch

from .model import TsfeConfig, window_loss
from .numerics import NonFiniteError, differentiate


class DivergenceError(NonFiniteError):
    pass


def fit(
    theta: torch.Tensor,
    windows: torch.Tensor,
    cfg: TsfeConfig,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    labels: torch.Tensor | None = None,
    batch_size: int = 64,
    state: dict | None = None,
    on_epoch=None,
) -> tuple[torch.Tensor, list[float]]:
    """Run ``epochs`` of shuffled mini-batch SGD; returns final params and epoch losses.

    ``on_epoch(e, theta)`` is called after every epoch with detached params.
    """
    theta = theta.detach().clone()
    n = windows.shape[0]
    history = []
    for e in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = torch.as_tensor(order[lo : lo + batch_size])
            th = theta.requires_grad_(True)
            loss, _ = window_loss(
                th,
                windows[idx],
                cfg,
                labels=None if labels is None else labels[idx],
                state=state,
                update_state=state is not None,
            )
            if not torch.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite in epoch {e + 1}")
            (g,) = differentiate(loss, [th])
            theta = (th - lr * g).detach()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if not torch.isfinite(theta).all():
            raise DivergenceError(f"parameters became non-finite in epoch {e + 1}")
        if on_epoch is not None:
            on_epoch(e, theta)
    return theta, history
