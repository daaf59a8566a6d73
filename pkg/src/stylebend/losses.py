"""Cyclic alignment: perturb -> rectify -> re-perturb -> re-rectify, and the losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .adapter import rectify
from .perturb import GlobalStatsBank, Mode, perturb_global, perturb_local, perturb_rows
from .stats import DEFAULT_EPS, ChannelStats, channel_stats
from .tensor import ShapeError, Tensor
from . import functional as Fn


@dataclass
class LossBreakdown:
    l_bce: Tensor
    l_cyc: Tensor
    l_align: Tensor
    total: Tensor

    def values(self) -> dict:
        return {
            "l_bce": self.l_bce.item(),
            "l_cyc": self.l_cyc.item(),
            "l_align": self.l_align.item(),
            "total": self.total.item(),
        }


def stats_l1(a: ChannelStats, b: ChannelStats) -> Tensor:
    """Channel-mean of |d mu| + |d sigma|, averaged over the batch."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"stats shapes differ: {a.mu.shape} vs {b.mu.shape}")
    return ((a.mu - b.mu).abs() + (a.sigma - b.sigma).abs()).mean()


def apply_perturbation(F: Tensor, alpha: Tensor, beta: Tensor,
                       mode: Union[Mode, Sequence[Mode]], bank: Optional[GlobalStatsBank],
                       stage: int, eps: float = DEFAULT_EPS) -> Tensor:
    if isinstance(mode, Mode):
        if mode is Mode.NONE:
            return F
        if mode is Mode.LOCAL:
            return perturb_local(F, alpha, beta, eps)
        return perturb_global(F, alpha, beta, bank, stage)
    return perturb_rows(F, alpha, beta, mode, bank, stage, eps)


def cyclic_chain(F_o: Tensor, alpha: Tensor, beta: Tensor, mode, bank: Optional[GlobalStatsBank],
                 adapter, stage: int, cycle: bool = True,
                 eps: float = DEFAULT_EPS) -> Tuple[Tensor, Optional[Tensor]]:
    """Return ``(F_rect, F'_rect)``; the second is ``None`` when ``cycle`` is off.

    ``adapter`` is anything with ``factors(F, stage) -> RectificationFactors``.
    The re-perturbation uses the same factors and the same mean reference
    (own mean for local rows, bank mean for global rows) as the first one.
    """
    F_p = apply_perturbation(F_o, alpha, beta, mode, bank, stage, eps)
    F_rect = rectify(F_p, adapter.factors(F_p, stage), eps)
    if not cycle:
        return F_rect, None
    F_rect_p = apply_perturbation(F_rect, alpha, beta, mode, bank, stage, eps)
    F_rect2 = rectify(F_rect_p, adapter.factors(F_rect_p, stage), eps)
    return F_rect, F_rect2


def total_loss(pred_logits: Tensor, query_mask, F_o_stats: Sequence[ChannelStats],
               F_rect_stats: Sequence[ChannelStats], F_rect2_stats: Sequence[Optional[ChannelStats]],
               use_cyc: bool = True, use_align: bool = True) -> LossBreakdown:
    """BCE on the query plus stage-averaged cyclic and alignment terms.

    Disabled terms are reported as exact zeros so that ``total`` is always the
    plain sum of the three components.
    """
    l_bce = Fn.bce_with_logits(pred_logits, query_mask)
    zero = Tensor(np.zeros((), dtype=l_bce.dtype))
    n = len(F_o_stats)
    l_cyc = zero
    l_align = zero
    if use_cyc and n:
        if any(s is None for s in F_rect2_stats):
            raise ValueError("cyclic loss requested but the chain was run without the cycle")
        terms = [stats_l1(o, r) for o, r in zip(F_o_stats, F_rect2_stats)]
        l_cyc = _average(terms)
    if use_align and n:
        l_align = _average([stats_l1(o, r) for o, r in zip(F_o_stats, F_rect_stats)])
    total = l_bce + l_cyc + l_align
    return LossBreakdown(l_bce, l_cyc, l_align, total)


def _average(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))
