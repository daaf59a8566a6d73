"""Per-channel feature statistics and AdaIN re-styling."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ShapeError, Tensor

DEFAULT_EPS = 1e-5


@dataclass
class ChannelStats:
    """Spatial mean and eps-stabilised std of a [B,C,H,W] map, each [B,C]."""

    mu: Tensor
    sigma: Tensor
    eps: float = DEFAULT_EPS

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    def detach(self) -> "ChannelStats":
        return ChannelStats(self.mu.detach(), self.sigma.detach(), self.eps)


def channel_stats(F: Tensor, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Mean and sqrt(biased variance + eps) over H and W, differentiable in F."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if F.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {F.shape}")
    if F.shape[2] * F.shape[3] == 0:
        raise ShapeError("empty spatial extent")
    mu = F.mean(axis=(2, 3))
    centered = F - mu
    var = (centered * centered).mean(axis=(2, 3))
    return ChannelStats(mu, (var + eps).sqrt(), eps)


def _check(F: Tensor, s: ChannelStats, name: str) -> None:
    if s.mu.shape != s.sigma.shape or s.mu.shape != F.shape[:2]:
        raise ShapeError(f"{name} stats shape {s.mu.shape}/{s.sigma.shape} do not match map {F.shape}")


def adain(F: Tensor, src: ChannelStats, dst: ChannelStats) -> Tensor:
    """Re-style ``F`` from ``src`` statistics to ``dst`` statistics."""
    _check(F, src, "src")
    _check(F, dst, "dst")
    return dst.sigma * ((F - src.mu) / src.sigma) + dst.mu
