"""Episodic few-shot segmentation: encoder with style hooks, prototypes, matching, mIoU."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as Fn
from .adapter import RectAdapter, rectify_stage
from .losses import LossBreakdown, cyclic_chain, total_loss
from .perturb import GlobalStatsBank, Mode, PerturbConfig, draw_factors, update_bank
from .stats import DEFAULT_EPS, ChannelStats, channel_stats
from .tensor import ShapeError, Tensor, no_grad, stack


class EmptyForegroundError(ValueError):
    pass


class RunMode(str, enum.Enum):
    BASELINE_TRAIN = "baseline-train"
    ADAPTER_TRAIN = "adapter-train"
    EVAL = "eval"


@dataclass
class Episode:
    supports: List[Tuple[np.ndarray, np.ndarray]]
    query: Tuple[np.ndarray, np.ndarray]
    class_id: int
    style_id: str
    episode_id: str = ""

    def __post_init__(self):
        if not self.supports:
            raise ValueError("an episode needs at least one support pair")
        for _, m in self.supports + [self.query]:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("masks must be binary {0,1}")
        for _, m in self.supports:
            if not m.any():
                raise EmptyForegroundError("support mask has no foreground pixel")

    @property
    def shots(self) -> int:
        return len(self.supports)


class Encoder:
    """Stages of (3x3 conv, relu) x2 + 2x2 average pool."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), in_channels: int = 3,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.stages: List[Dict[str, Tensor]] = []
        cin = in_channels
        for cout in self.channels:
            stage = {}
            for tag, ci in (("a", cin), ("b", cout)):
                std = np.sqrt(2.0 / (ci * 9))
                stage[f"w{tag}"] = Tensor(rng.normal(0.0, std, size=(cout, ci, 3, 3)), requires_grad=True)
                stage[f"b{tag}"] = Tensor(np.zeros(cout), requires_grad=True)
            self.stages.append(stage)
            cin = cout

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    def parameters(self):
        for st in self.stages:
            yield from (st["wa"], st["ba"], st["wb"], st["bb"])

    def stage_forward(self, x: Tensor, i: int) -> Tensor:
        st = self.stages[i]
        h = Fn.conv2d(x, st["wa"], st["ba"], pad=1).relu()
        h = Fn.conv2d(h, st["wb"], st["bb"], pad=1).relu()
        return Fn.avg_pool2d(h, 2)

    def to_entries(self) -> Dict[str, np.ndarray]:
        return {f"encoder.stage{i}.{k}": t.data for i, st in enumerate(self.stages) for k, t in st.items()}

    def load_entries(self, entries) -> None:
        for i, st in enumerate(self.stages):
            for k, t in st.items():
                key = f"encoder.stage{i}.{k}"
                if entries[key].shape != t.shape:
                    raise ShapeError(f"{key}: checkpoint shape {entries[key].shape} != {t.shape}")
                t.data = np.array(entries[key], dtype=t.dtype)


@dataclass
class PerturbPlan:
    """Per-stage (alpha [B,C], beta [B,C], per-row modes) for one batch."""

    alpha: Dict[int, np.ndarray]
    beta: Dict[int, np.ndarray]
    modes: Dict[int, List[Mode]]


@dataclass
class Hooks:
    adapter: Optional[RectAdapter] = None
    rectify: bool = False
    plan: Optional[PerturbPlan] = None
    bank: Optional[GlobalStatsBank] = None
    update_bank: bool = False
    cycle: bool = False
    eps: float = DEFAULT_EPS


@dataclass
class StageTrace:
    stage: int
    F_o: ChannelStats
    F_rect: Optional[ChannelStats] = None
    F_rect2: Optional[ChannelStats] = None


def encode(images: Tensor, encoder: Encoder, hooks: Optional[Hooks] = None,
           stop_after: Optional[int] = None) -> Tuple[Tensor, List[StageTrace]]:
    """Run the encoder, applying perturbation/rectification after hooked stages.

    With a ``plan`` (adapter training) each hooked stage output is perturbed,
    rectified and, if ``cycle`` is set, pushed through the second half of the
    cyclic chain for the loss.  Without a plan but with ``rectify`` (test
    time) features are rectified only.
    """
    hooks = hooks or Hooks()
    h = images
    trace: List[StageTrace] = []
    hooked = set(hooks.adapter.stages) if hooks.adapter is not None else set()
    for i in range(len(encoder.channels)):
        h = encoder.stage_forward(h, i)
        if hooks.update_bank and hooks.bank is not None:
            with no_grad():
                update_bank(hooks.bank, channel_stats(h.detach(), hooks.eps), i)
        if hooks.plan is not None and i in hooked:
            st_o = channel_stats(h, hooks.eps).detach()
            alpha = Tensor(hooks.plan.alpha[i])
            beta = Tensor(hooks.plan.beta[i])
            F_rect, F_rect2 = cyclic_chain(h, alpha, beta, hooks.plan.modes[i], hooks.bank,
                                           hooks.adapter, i, cycle=hooks.cycle, eps=hooks.eps)
            trace.append(StageTrace(
                i, st_o, channel_stats(F_rect, hooks.eps),
                None if F_rect2 is None else channel_stats(F_rect2, hooks.eps)))
            h = F_rect
        elif hooks.rectify and i in hooked:
            st_o = channel_stats(h, hooks.eps)
            h = rectify_stage(h, hooks.adapter, i, True)
            trace.append(StageTrace(i, st_o, channel_stats(h, hooks.eps)))
        else:
            trace.append(StageTrace(i, channel_stats(h, hooks.eps)))
        if stop_after is not None and i >= stop_after:
            break
    return h, trace


def masked_prototype(features: Tensor, masks: Sequence[np.ndarray]) -> Tensor:
    """Masked average pooling over K support maps in one pool -> [C].

    ``features`` is [K,C,h,w]; each mask is [1,H,W] and is resized to (h, w)
    by nearest neighbour first.
    """
    if features.ndim == 3:
        features = features.reshape((1,) + features.shape)
    K, C, h, w = features.shape
    if len(masks) != K:
        raise ShapeError(f"{len(masks)} masks for {K} feature maps")
    m = np.stack([Fn.resize_nearest(np.asarray(mk, dtype=features.dtype).reshape(mk.shape[-2:]), (h, w))
                  for mk in masks])[:, None]
    total = float(m.sum())
    if total == 0:
        raise EmptyForegroundError("empty support foreground")
    pooled = (features * Tensor(m)).sum(axis=(0, 2, 3))
    return pooled * (1.0 / total)


NORM_EPS = 1e-12


def match(query_feat: Tensor, proto: Tensor, tau: float = 10.0) -> Tensor:
    """tau * cosine(proto, query pixel) for every position.

    Accepts a single [C,h,w] map with a [C] prototype (-> [1,h,w]) or a batch
    [E,C,h,w] with [E,C] prototypes (-> [E,1,h,w]).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    single = query_feat.ndim == 3
    if single:
        query_feat = query_feat.reshape((1,) + query_feat.shape)
        proto = proto.reshape((1,) + proto.shape)
    E, C, h, w = query_feat.shape
    if proto.shape != (E, C):
        raise ShapeError(f"prototype shape {proto.shape} incompatible with {query_feat.shape}")
    if (np.linalg.norm(proto.data, axis=1) == 0).any():
        raise EmptyForegroundError("zero-norm prototype")
    pn = (proto * proto).sum(axis=1).sqrt()
    p_hat = proto / pn.reshape((E, 1))
    dots = (query_feat * p_hat.reshape((E, C, 1, 1))).sum(axis=1, keepdims=True)
    qn = ((query_feat * query_feat).sum(axis=1, keepdims=True) + NORM_EPS).sqrt()
    logits = (dots / qn) * tau
    return logits.reshape((1, h, w)) if single else logits


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
         classes: Optional[Sequence] = None) -> float:
    """Foreground IoU averaged over episodes per class, then over classes."""
    if len(preds) == 0:
        raise ValueError("miou of an empty list")
    if len(preds) != len(gts):
        raise ValueError("preds and gts differ in length")
    if classes is None:
        classes = [0] * len(preds)
    per_class: Dict = defaultdict(list)
    for p, g, c in zip(preds, gts, classes):
        per_class[c].append(iou(p, g))
    return float(np.mean([np.mean(v) for _, v in sorted(per_class.items(), key=lambda kv: str(kv[0]))]))


@dataclass
class FewShotModel:
    encoder: Encoder
    adapter: RectAdapter
    bank: GlobalStatsBank
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    tau: float = 10.0
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels=(16, 32, 64), seed: int = 0, perturb: Optional[PerturbConfig] = None,
               reduction: int = 4, scale: float = 1.0, lam: float = 0.99, tau: float = 10.0,
               eps: float = DEFAULT_EPS) -> "FewShotModel":
        perturb = perturb or PerturbConfig()
        rng = np.random.default_rng(seed)
        enc = Encoder(channels, rng=rng)
        hooked = {s: enc.channels[s] for s in sorted(perturb.stages) if s < len(enc.channels)}
        ad = RectAdapter(hooked, reduction, scale, rng=rng, eps=eps)
        return cls(enc, ad, GlobalStatsBank(lam), perturb, tau, eps)

    def to_entries(self) -> Dict[str, np.ndarray]:
        out = dict(self.encoder.to_entries())
        out.update(self.adapter.to_entries())
        out.update(self.bank.to_entries())
        return out

    def load_entries(self, entries) -> None:
        self.encoder.load_entries(entries)
        self.adapter.load_entries(entries)
        self.bank = GlobalStatsBank.from_entries(entries, self.bank.lam)


@dataclass
class BatchResult:
    logits: Tensor
    probs: np.ndarray
    loss: Optional[LossBreakdown]
    bce_per_episode: np.ndarray
    trace: List[StageTrace]


def _stack_batch(episodes: Sequence[Episode]):
    K = episodes[0].shots
    if any(ep.shots != K for ep in episodes):
        raise ValueError("all episodes in a batch must have the same shot count")
    imgs = []
    for ep in episodes:
        imgs.extend(img for img, _ in ep.supports)
        imgs.append(ep.query[0])
    return K, np.stack(imgs)


def plan_for_batch(model: FewShotModel, episodes: Sequence[Episode],
                   rng: np.random.Generator) -> PerturbPlan:
    """One gating draw and one (alpha, beta) per episode and stage, shared by
    that episode's supports and query."""
    K = episodes[0].shots
    alpha, beta, modes = {}, {}, {}
    for s in model.adapter.stages:
        C = model.encoder.channels[s]
        rows_a, rows_b, rows_m = [], [], []
        for _ in episodes:
            a, b, m = draw_factors(model.perturb, C, s, rng)
            if m is Mode.GLOBAL and not model.bank.initialized(s):
                a, b, m = np.zeros(C), np.zeros(C), Mode.NONE
            rows_a.extend([a] * (K + 1))
            rows_b.extend([b] * (K + 1))
            rows_m.extend([m] * (K + 1))
        alpha[s] = np.stack(rows_a)
        beta[s] = np.stack(rows_b)
        modes[s] = rows_m
    return PerturbPlan(alpha, beta, modes)


def run_batch(episodes: Sequence[Episode], model: FewShotModel, mode: RunMode,
              rng: Optional[np.random.Generator] = None, rectify: bool = True,
              use_cyc: bool = True, use_align: bool = True) -> BatchResult:
    """Forward a batch of same-shot episodes through encoder, prototype and matching.

    Training modes also build the loss; the caller owns ``backward`` and the
    optimizer step.
    """
    mode = RunMode(mode)
    K, imgs = _stack_batch(episodes)
    x = Tensor(imgs)
    if mode is RunMode.BASELINE_TRAIN:
        hooks = Hooks(bank=model.bank, update_bank=True, eps=model.eps)
    elif mode is RunMode.ADAPTER_TRAIN:
        if rng is None:
            raise ValueError("adapter training needs an rng")
        hooks = Hooks(adapter=model.adapter, plan=plan_for_batch(model, episodes, rng),
                      bank=model.bank, cycle=use_cyc, eps=model.eps)
    else:
        hooks = Hooks(adapter=model.adapter, rectify=rectify, eps=model.eps)

    if mode is RunMode.EVAL:
        with no_grad():
            return _forward(episodes, model, mode, x, K, hooks, use_cyc, use_align)
    return _forward(episodes, model, mode, x, K, hooks, use_cyc, use_align)


def _forward(episodes, model, mode, x, K, hooks, use_cyc, use_align) -> BatchResult:
    feats, trace = encode(x, model.encoder, hooks)
    E = len(episodes)
    C, h, w = feats.shape[1:]
    fg_protos, bg_protos, queries = [], [], []
    for e, ep in enumerate(episodes):
        base = e * (K + 1)
        sup = feats[base:base + K]
        fg_protos.append(masked_prototype(sup, [m for _, m in ep.supports]))
        bg_protos.append(masked_prototype(sup, [1 - m for _, m in ep.supports]))
    q_idx = [e * (K + 1) + K for e in range(E)]
    q = feats[q_idx]
    pf = stack(fg_protos)
    pb = stack(bg_protos)
    logits_small = match(q, pf, model.tau) - match(q, pb, model.tau)
    H, W = episodes[0].query[1].shape[-2:]
    logits = Fn.upsample_bilinear(logits_small, (H, W))
    qmask = np.stack([ep.query[1].reshape(1, H, W) for ep in episodes]).astype(logits.dtype)

    bound = np.log((1 - Fn.PROB_FLOOR) / Fn.PROB_FLOOR)
    z = np.clip(logits.data, -bound, bound)
    bce_each = (np.maximum(z, 0) - z * qmask + np.log1p(np.exp(-np.abs(z)))).mean(axis=(1, 2, 3))
    probs = 1.0 / (1.0 + np.exp(-z))

    loss = None
    if mode is RunMode.BASELINE_TRAIN:
        loss = total_loss(logits, qmask, [], [], [], use_cyc=False, use_align=False)
    elif mode is RunMode.ADAPTER_TRAIN:
        hooked = [t for t in trace if t.F_rect is not None]
        loss = total_loss(logits, qmask, [t.F_o for t in hooked], [t.F_rect for t in hooked],
                          [t.F_rect2 for t in hooked], use_cyc=use_cyc, use_align=use_align)
    return BatchResult(logits, probs, loss, bce_each, trace)


def run_episode(episode: Episode, model: FewShotModel, mode: RunMode,
                rng: Optional[np.random.Generator] = None, **kw) -> BatchResult:
    return run_batch([episode], model, mode, rng, **kw)


def predict_masks(result: BatchResult, threshold: float = 0.5) -> np.ndarray:
    return (result.probs[:, 0] > threshold).astype(np.uint8)
