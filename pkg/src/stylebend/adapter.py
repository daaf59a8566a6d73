"""Domain-rectifying adapter.

The adapter reads the channel statistics of a (possibly style-shifted)
feature map and predicts per-channel factors that move those statistics
back toward the source style.  One small bottleneck MLP per hooked stage::

    concat(mu, sigma) [2C] -> linear -> relu [C/r] -> linear [2C] -> s * tanh
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np

from . import functional as Fn
from .stats import DEFAULT_EPS, channel_stats
from .tensor import ShapeError, Tensor, concat

SATURATION_MARGIN = 1e-6


@dataclass
class RectificationFactors:
    alpha_rect: Tensor
    beta_rect: Tensor


class RectAdapter:
    def __init__(self, channels: Mapping[int, int], reduction: int = 4, scale: float = 1.0,
                 rng: Optional[np.random.Generator] = None, eps: float = DEFAULT_EPS):
        if not 0 < scale <= 1.0:
            raise ValueError("output scale must be in (0, 1] so that 1 + beta_rect > 0")
        if reduction < 1:
            raise ValueError("reduction must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.reduction = reduction
        self.scale = scale
        self.eps = eps
        self.params: Dict[int, Dict[str, Tensor]] = {}
        for stage, C in sorted(channels.items()):
            hidden = max(1, C // reduction)
            self.params[stage] = {
                "w1": Tensor(rng.normal(0.0, np.sqrt(2.0 / (2 * C)), size=(hidden, 2 * C)),
                             requires_grad=True),
                "b1": Tensor(np.zeros(hidden), requires_grad=True),
                # zero output layer: the adapter starts as the identity map
                "w2": Tensor(np.zeros((2 * C, hidden)), requires_grad=True),
                "b2": Tensor(np.zeros(2 * C), requires_grad=True),
            }

    @property
    def stages(self) -> List[int]:
        return sorted(self.params)

    def parameters(self) -> Iterable[Tensor]:
        for stage in self.stages:
            p = self.params[stage]
            yield from (p["w1"], p["b1"], p["w2"], p["b2"])

    def factors(self, F: Tensor, stage: int) -> RectificationFactors:
        return predict_factors(F, self, stage)

    def to_entries(self) -> Dict[str, np.ndarray]:
        out = {}
        for stage in self.stages:
            for name, t in self.params[stage].items():
                out[f"adapter.stage{stage}.{name}"] = t.data
        return out

    def load_entries(self, entries: Mapping[str, np.ndarray]) -> None:
        for stage in self.stages:
            for name, t in self.params[stage].items():
                key = f"adapter.stage{stage}.{name}"
                arr = entries[key]
                if arr.shape != t.shape:
                    raise ShapeError(f"{key}: checkpoint shape {arr.shape} != {t.shape}")
                t.data = np.array(arr, dtype=t.dtype)


def predict_factors(F_p: Tensor, adapter: RectAdapter, stage: int) -> RectificationFactors:
    if stage not in adapter.params:
        raise KeyError(f"adapter has no parameters for stage {stage}")
    p = adapter.params[stage]
    C = F_p.shape[1]
    if p["b2"].shape[0] != 2 * C:
        raise ShapeError(f"stage {stage} adapter built for {p['b2'].shape[0] // 2} channels, got {C}")
    st = channel_stats(F_p, adapter.eps)
    h = Fn.linear(concat([st.mu, st.sigma], axis=1), p["w1"], p["b1"]).relu()
    out = Fn.linear(h, p["w2"], p["b2"]).tanh()
    s = adapter.scale
    # tanh saturates to exactly -1 in floating point; keep 1 + beta_rect > 0
    return RectificationFactors(out[:, :C] * s, out[:, C:] * (s * (1.0 - SATURATION_MARGIN)))


def rectify(F_p: Tensor, factors: RectificationFactors, eps: float = DEFAULT_EPS) -> Tensor:
    """(1 + beta_rect) * F_p + (alpha_rect - beta_rect) * mu(F_p)."""
    a, b = factors.alpha_rect, factors.beta_rect
    if a.shape[-1] != F_p.shape[1] or b.shape[-1] != F_p.shape[1]:
        raise ShapeError(f"factors {a.shape}/{b.shape} do not match map {F_p.shape}")
    mu = channel_stats(F_p, eps).mu
    return (1.0 + b) * F_p + (a - b) * mu


def rectify_stage(F: Tensor, adapter: Optional[RectAdapter], stage: int, enabled: bool) -> Tensor:
    if not enabled or adapter is None:
        return F
    return rectify(F, predict_factors(F, adapter, stage), adapter.eps)
