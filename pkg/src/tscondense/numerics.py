"""Dense tensor helpers and reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects and the autograd graph plays the role of
the tape: a graph built with ``create_graph=True`` spans any number of chained
optimizer steps, which is what unrolled inner-loop differentiation needs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float32


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def as_tensor(x, dtype: torch.dtype = DTYPE, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def differentiate(
    scalar_loss: torch.Tensor,
    params: Sequence[torch.Tensor],
    create_graph: bool = False,
) -> list[torch.Tensor]:
    """Gradient of a scalar loss with respect to each tensor in ``params``.

    Parameters that did not take part in the computation receive zeros.
    With ``create_graph=True`` the returned gradients are themselves on the
    tape, so a later loss can be differentiated through them.
    """
    if scalar_loss.numel() != 1 or scalar_loss.dim() > 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(scalar_loss.shape)}")
    if not scalar_loss.requires_grad:
        raise ContractError("loss was not produced on an active tape")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("every parameter must require grad")
    grads = torch.autograd.grad(
        scalar_loss.reshape(()),
        params,
        create_graph=create_graph,
        allow_unused=True,
    )
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def finite_difference_errors(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-3,
    coords: Sequence[int] | None = None,
) -> np.ndarray:
    """Per-coordinate relative error between autograd and central differences.

    The analytic gradient is taken at the point's own dtype; the numeric side
    evaluates ``f`` in float64. ``f`` must therefore accept either dtype.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    x = point.detach().clone().requires_grad_(True)
    y = f(x)
    if not torch.isfinite(y).all():
        raise NonFiniteError("f returned a non-finite value")
    if y.requires_grad:
        (analytic,) = differentiate(y, [x])
    else:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().double().reshape(-1).numpy()

    base = point.detach().double().reshape(-1)
    idx = range(base.numel()) if coords is None else coords
    errs = []
    for i in idx:
        xp = base.clone()
        xm = base.clone()
        xp[i] += epsilon
        xm[i] -= epsilon
        # no no_grad here: f may differentiate internally (unrolled updates)
        fp = f(xp.reshape(point.shape)).detach().double().item()
        fm = f(xm.reshape(point.shape)).detach().double().item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f returned a non-finite value near coordinate {i}")
        numeric = (fp - fm) / (2.0 * epsilon)
        errs.append(abs(analytic[i] - numeric) / (abs(numeric) + 1e-8))
    return np.asarray(errs)


def finite_difference_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-3,
) -> float:
    """Max relative error over coordinates, ``|analytic - numeric| / (|numeric| + 1e-8)``."""
    errs = finite_difference_errors(f, point, epsilon)
    return float(errs.max()) if errs.size else 0.0


def avg_pool_1d(series: torch.Tensor, kernel: int, dim: int = -1) -> torch.Tensor:
    """Centered moving average with replicate-edge padding; length preserved.

    Window sums are accumulated in float64 and rounded back to the input dtype,
    so a constant series maps to itself exactly.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return series.clone()
    x = series.movedim(dim, -1).double()
    pad = (kernel - 1) // 2
    front = x[..., :1].expand(*x.shape[:-1], pad)
    back = x[..., -1:].expand(*x.shape[:-1], pad)
    padded = torch.cat([front, x, back], dim=-1)
    out = padded.unfold(-1, kernel, 1).sum(dim=-1) / kernel
    return out.to(series.dtype).movedim(-1, dim)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between two flattened tensors.

    A zero-norm operand yields similarity 0 with a zero gradient.
    """
    u = u.reshape(-1)
    v = v.reshape(-1)
    if u.numel() != v.numel():
        raise ContractError(f"length mismatch: {u.numel()} vs {v.numel()}")
    nu2 = (u * u).sum()
    nv2 = (v * v).sum()
    if nu2.item() == 0.0 or nv2.item() == 0.0:
        return (u * 0.0).sum() + (v * 0.0).sum()
    return (u * v).sum() / (torch.sqrt(nu2) * torch.sqrt(nv2))
