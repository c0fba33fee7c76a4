"""Moving-average trend/seasonality decomposition and frequency matching."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import ContractError, avg_pool_1d, cosine_similarity

DEFAULT_KERNEL = 25


@dataclass
class FrequencyPair:
    """Trend and seasonality of a feature tensor.

    Both components are held in float64: the trend is rounded to the input
    dtype first, so the float64 difference is exact and ``trend + seasonality``
    reproduces the input bit-for-bit.
    """

    trend: torch.Tensor
    seasonality: torch.Tensor

    def reconstruct(self) -> torch.Tensor:
        return self.trend + self.seasonality


def effective_kernel(kernel: int, num_patches: int) -> int:
    """Clamp to the largest odd kernel not exceeding ``2 * num_patches - 1``."""
    limit = 2 * num_patches - 1
    k = min(kernel, limit)
    return k if k % 2 else k - 1


def series_decompose(h: torch.Tensor, kernel: int = DEFAULT_KERNEL, axis: int = -2) -> FrequencyPair:
    """Split ``[..., P, d]`` features along the patch axis."""
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"kernel must be odd and >= 1, got {kernel}")
    trend = avg_pool_1d(h, kernel, dim=axis).double()
    return FrequencyPair(trend=trend, seasonality=h.double() - trend)


def frequency_matching_loss(
    features_T: list[torch.Tensor],
    features_S: list[torch.Tensor],
    kernel: int = DEFAULT_KERNEL,
) -> torch.Tensor:
    """Negative mean (over layers) of trend and seasonality cosine similarities.

    Features are ``[B, C, P, d]``; each component is averaged over the batch
    axis before the cosine, which reconciles different batch sizes.
    """
    if len(features_T) != len(features_S) or not features_T:
        raise ContractError(f"layer count mismatch: {len(features_T)} vs {len(features_S)}")
    total = None
    for hT, hS in zip(features_T, features_S):
        if hT.shape[1:] != hS.shape[1:]:
            raise ContractError(f"feature shapes differ: {tuple(hT.shape)} vs {tuple(hS.shape)}")
        k = effective_kernel(kernel, hT.shape[-2])
        dT = series_decompose(hT, k)
        dS = series_decompose(hS, k)
        term = cosine_similarity(dT.trend.mean(0), dS.trend.mean(0)) + cosine_similarity(
            dT.seasonality.mean(0), dS.seasonality.mean(0)
        )
        total = term if total is None else total + term
    return (-total / len(features_T)).to(features_S[0].dtype)
