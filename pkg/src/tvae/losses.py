"""Reconstruction, edge-aware weighting and KL terms of the training objective.

Reduction convention: mean over batch and pixels for reconstruction, sum over
latent dimensions and mean over batch for KL, sum over time steps for both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ConfigError, DataError, ShapeError
from .model import LatentGaussian


@dataclass
class LossWeights:
    lambda_edge: float = 1.0
    blur_sigma: float = 5.0
    kl_weight: float = 1e-4
    recon_mode: str = "edge_aware"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_edge <= 1.0:
            raise ConfigError(f"lambda_edge must be in [0,1], got {self.lambda_edge}")
        if self.blur_sigma <= 0:
            raise ConfigError("blur_sigma must be > 0")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if self.recon_mode not in ("mse", "edge_aware"):
            raise ConfigError(f"recon_mode must be 'mse' or 'edge_aware', got {self.recon_mode!r}")


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def item(self) -> dict[str, float]:
        return {"recon": float(self.recon), "kl": float(self.kl), "total": float(self.total)}


def _pairs(predictions: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]):
    if len(predictions) != len(targets):
        raise ShapeError(f"{len(predictions)} predictions vs {len(targets)} targets")
    for p, t in zip(predictions, targets):
        if p.shape != t.shape:
            raise ShapeError(f"prediction {tuple(p.shape)} vs target {tuple(t.shape)}")
        yield p, t


def recon_mse(predictions: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> torch.Tensor:
    return sum(((p - t) ** 2).mean() for p, t in _pairs(predictions, targets))


def recon_edge_aware(
    predictions: Sequence[torch.Tensor],
    targets: Sequence[torch.Tensor],
    mask: torch.Tensor,
    lambda_edge: float,
) -> torch.Tensor:
    """Squared residual weighted by ``1 + lambda_edge * mask`` per pixel."""
    weight = 1.0 + lambda_edge * mask.detach()
    total = 0.0
    for p, t in _pairs(predictions, targets):
        if weight.shape != p.shape:
            raise ShapeError(f"mask {tuple(mask.shape)} vs prediction {tuple(p.shape)}")
        total = total + (weight * (p - t) ** 2).mean()
    return total


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = math.ceil(3.0 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_index(n: int, radius: int) -> torch.Tensor:
    # half-sample symmetric reflection (d c b a | a b c d | d c b a), any width
    idx = torch.arange(-radius, n + radius)
    period = 2 * n
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - 1 - idx, idx)


def _blur_axis(x: torch.Tensor, kernel: torch.Tensor, dim: int) -> torch.Tensor:
    radius = (kernel.numel() - 1) // 2
    n = x.shape[dim]
    padded = x.index_select(dim, _reflect_index(n, radius).to(x.device))
    windows = padded.unfold(dim, kernel.numel(), 1)  # window axis appended last
    return (windows * kernel.to(x.dtype)).sum(-1)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable normalized Gaussian blur over the last two dims."""
    k = gaussian_kernel1d(sigma)
    return _blur_axis(_blur_axis(x, k, x.dim() - 2), k, x.dim() - 1)


def edge_mask(x1: torch.Tensor, blur_sigma: float = 5.0) -> torch.Tensor:
    """Blurred first-week frame rescaled to peak 1 per sample; no gradient.

    ``x1`` is (B, C, H, W) or (B, C, D, H, W); volumes are blurred in-plane.
    """
    x1 = x1.detach()
    if not torch.isfinite(x1).all():
        raise DataError("edge_mask input contains NaN or Inf")
    g = gaussian_blur(x1, blur_sigma)
    peak = g.reshape(g.shape[0], -1).amax(dim=1).reshape(-1, *([1] * (g.dim() - 1)))
    return torch.where(peak > 0, g / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(g))


def kl_gaussian(posterior: LatentGaussian, prior: LatentGaussian) -> torch.Tensor:
    """KL(posterior || prior) for diagonal Gaussians, summed over dims, mean over batch."""
    for t in (posterior.mu, posterior.log_var, prior.mu, prior.log_var):
        if not torch.isfinite(t).all():
            raise DataError("non-finite Gaussian parameters")
    lq, lp = posterior.log_var, prior.log_var
    kl = 0.5 * (lp - lq) + (torch.exp(lq) + (posterior.mu - prior.mu) ** 2) / (2.0 * torch.exp(lp)) - 0.5
    return kl.sum(dim=-1).mean()


def kl_sequence(posteriors: Sequence[LatentGaussian], priors: Sequence[LatentGaussian]) -> torch.Tensor:
    return sum(kl_gaussian(q, p) for q, p in zip(posteriors, priors, strict=True))


def total_loss(recon: torch.Tensor, kl: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    return LossBreakdown(recon=recon, kl=kl, total=recon + weights.kl_weight * kl)


def sequence_loss(
    predictions: Sequence[torch.Tensor],
    frames: torch.Tensor,
    posteriors: Sequence[LatentGaussian],
    priors: Sequence[LatentGaussian],
    weights: LossWeights,
) -> LossBreakdown:
    """Full objective for one teacher-forced pass over ``frames`` (T, B, ...)."""
    targets = list(frames[1:])
    if weights.recon_mode == "edge_aware":
        recon = recon_edge_aware(predictions, targets, edge_mask(frames[0], weights.blur_sigma), weights.lambda_edge)
    else:
        recon = recon_mse(predictions, targets)
    return total_loss(recon, kl_sequence(posteriors, priors), weights)
