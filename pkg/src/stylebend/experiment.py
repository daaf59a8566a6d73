"""Desk-scale cross-domain trend run: baseline vs rectified, plus the loss ablation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import SamplePool, load_manifest, load_test_episodes, load_train_pool, sample_episodes
from .model import Episode, FewShotModel, Hooks, encode
from .perturb import NoiseSpec, PerturbConfig
from .tensor import Tensor, no_grad, precision
from .train import (TrainConfig, evaluate, finalize_baseline, train_adapter, train_baseline,
                    write_csv)

log = logging.getLogger(__name__)

# name -> (use_cyc, use_align)
FLAG_CONFIGS: Dict[str, Tuple[bool, bool]] = {
    "bce": (False, False),
    "cyc": (True, False),
    "align": (False, True),
    "both": (True, True),
}

METRIC_FIELDS = ["seed", "config", "style_id", "shots", "rectify", "miou", "closer_frac", "episodes"]


def desk_perturb() -> PerturbConfig:
    # milder noise than the full-scale setting and only the first stage hooked
    return PerturbConfig(local_noise=NoiseSpec.gaussian(0.3), global_noise=NoiseSpec.gaussian(0.4),
                         stages=frozenset({0}))


@dataclass
class TrendConfig:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    baseline_steps: int = 120
    adapter_steps: int = 100
    batch_size: int = 8
    shots: int = 1
    baseline_lr: float = 0.01
    adapter_lr: float = 0.03
    perturb: PerturbConfig = field(default_factory=desk_perturb)
    configs: Tuple[str, ...] = ("bce", "cyc", "align", "both")
    eval_batch: int = 16
    source_episodes: int = 200

    def train_config(self, seed: int, name: str) -> TrainConfig:
        cyc, align = FLAG_CONFIGS[name]
        return TrainConfig(seed=seed, lr=self.adapter_lr, baseline_lr=self.baseline_lr,
                           epochs_baseline=1, epochs_adapter=1,
                           batch_size=self.batch_size, shots=self.shots, perturb=self.perturb,
                           use_cyc=cyc, use_align=align)


@dataclass
class SeedResult:
    seed: int
    rows: List[Dict[str, str]]
    baseline: Dict[str, float]
    rectified: Dict[str, Dict[str, float]]  # config -> style -> miou
    closer: Dict[str, float]  # style -> fraction, for the "both" config
    finite: Dict[str, bool]
    source_gap: float  # |on - off| mIoU on source-style episodes, "both" config
    seconds: float


def stat_distance(model: FewShotModel, images: np.ndarray, stage: int,
                  batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image L1 distance of stage channel means to the bank, before and after rectification."""
    ref = model.bank.get(stage)
    before, after = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size])
            _, tr = encode(x, model.encoder, Hooks(adapter=model.adapter, rectify=True, eps=model.eps),
                           stop_after=stage)
            t = tr[stage]
            before.append(np.abs(t.F_o.mu.data - ref).mean(axis=1))
            after.append(np.abs(t.F_rect.mu.data - ref).mean(axis=1))
    return np.concatenate(before), np.concatenate(after)


def _copy_model(model: FewShotModel, cfg: TrainConfig) -> FewShotModel:
    fresh = cfg.new_model()
    fresh.load_entries(model.to_entries())
    return fresh


def run_seed(seed: int, pool: SamplePool, tests: Dict[str, List[Episode]],
             cfg: TrendConfig) -> SeedResult:
    t0 = time.perf_counter()
    rows: List[Dict[str, str]] = []
    base_cfg = replace(cfg.train_config(seed, "both"),
                       episodes_per_epoch=cfg.baseline_steps * cfg.batch_size)
    with precision(base_cfg.precision):
        base = base_cfg.new_model()
    train_baseline(base_cfg, pool, base)
    finalize_baseline(base_cfg, pool, base)

    baseline: Dict[str, float] = {}
    for style, eps in tests.items():
        r = evaluate(base, eps, rectify=False, batch_size=cfg.eval_batch)
        baseline[style] = r.miou
        rows.append(_row(seed, "baseline", style, cfg.shots, False, r.miou, None, len(eps)))

    stage = min(cfg.perturb.stages)
    rectified: Dict[str, Dict[str, float]] = {}
    closer: Dict[str, float] = {}
    finite: Dict[str, bool] = {}
    source_gap = float("nan")
    for name in cfg.configs:
        tc = replace(cfg.train_config(seed, name), episodes_per_epoch=cfg.adapter_steps * cfg.batch_size)
        model = _copy_model(base, tc)
        losses = train_adapter(tc, pool, model)
        finite[name] = all(np.isfinite(float(r["total"])) for r in losses)
        rectified[name] = {}
        for style, eps in tests.items():
            r = evaluate(model, eps, rectify=True, batch_size=cfg.eval_batch)
            rectified[name][style] = r.miou
            frac = None
            if name == "both":
                q = np.stack([ep.query[0] for ep in eps])
                d0, d1 = stat_distance(model, q, stage)
                frac = float(np.mean(d1 < d0))
                closer[style] = frac
            rows.append(_row(seed, name, style, cfg.shots, True, r.miou, frac, len(eps)))
        if name == "both":
            # the source style has no test split; draw episodes from the training pool
            src = sample_episodes(pool, cfg.source_episodes, cfg.shots, np.random.default_rng([seed, 3]))
            on = evaluate(model, src, rectify=True, batch_size=cfg.eval_batch).miou
            off = evaluate(model, src, rectify=False, batch_size=cfg.eval_batch).miou
            source_gap = abs(on - off)
            rows.append(_row(seed, name, pool.style_id, cfg.shots, False, off, None, len(src)))
            rows.append(_row(seed, name, pool.style_id, cfg.shots, True, on, None, len(src)))
    secs = time.perf_counter() - t0
    log.info("seed %d done in %.1fs", seed, secs)
    return SeedResult(seed, rows, baseline, rectified, closer, finite, source_gap, secs)


def _row(seed, config, style, shots, rectify, miou, frac, n) -> Dict[str, str]:
    return {"seed": str(seed), "config": config, "style_id": style, "shots": str(shots),
            "rectify": str(int(rectify)), "miou": f"{miou:.6f}",
            "closer_frac": "" if frac is None else f"{frac:.6f}", "episodes": str(n)}


@dataclass
class TrendReport:
    seeds: List[SeedResult]
    target_styles: List[str]
    largest_shift: str

    def mean_baseline(self, style: Optional[str] = None) -> float:
        styles = [style] if style else self.target_styles
        return float(np.mean([s.baseline[t] for s in self.seeds for t in styles]))

    def mean_rectified(self, config: str = "both", style: Optional[str] = None) -> float:
        styles = [style] if style else self.target_styles
        return float(np.mean([s.rectified[config][t] for s in self.seeds for t in styles]))

    def closer_fraction(self) -> float:
        return float(np.mean([s.closer[t] for s in self.seeds for t in self.target_styles]))

    def max_source_gap(self) -> float:
        return float(max(s.source_gap for s in self.seeds))

    def all_finite(self) -> bool:
        return all(all(s.finite.values()) for s in self.seeds)

    @property
    def rows(self) -> List[Dict[str, str]]:
        return [r for s in self.seeds for r in s.rows]


def run_trend(root, cfg: Optional[TrendConfig] = None, out: Optional[Path] = None) -> TrendReport:
    """Every seed trains one baseline and one adapter per flag config on the
    source pool, then evaluates on all target styles of the benchmark."""
    cfg = cfg or TrendConfig()
    m = load_manifest(root)
    pool = load_train_pool(root)
    tests = {s: load_test_episodes(root, s, cfg.shots) for s in m.target_styles}
    results = [run_seed(seed, pool, tests, cfg) for seed in cfg.seeds]
    # the last target style in the manifest is the furthest from the source
    report = TrendReport(results, list(m.target_styles), m.target_styles[-1])
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "trend_metrics.csv", METRIC_FIELDS, report.rows)
    return report
