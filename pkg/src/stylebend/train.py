"""Two-phase training, evaluation and statistics export."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from .dataset import SamplePool, episode_stream
from .model import Episode, FewShotModel, RunMode, iou, miou, predict_masks, run_batch
from .optim import SGD
from .perturb import PerturbConfig
from .stats import DEFAULT_EPS
from .tensor import NonFiniteError, precision

log = logging.getLogger(__name__)

LOSS_FIELDS = ["phase", "step", "l_bce", "l_cyc", "l_align", "total"]
EPISODE_FIELDS = ["episode_id", "class_id", "style_id", "shots", "iou", "l_bce"]
SUMMARY_FIELDS = ["style_id", "shots", "rectify", "miou", "episodes"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    baseline_lr: float = 0.01
    momentum: float = 0.9
    epochs_baseline: int = 20
    epochs_adapter: int = 5
    episodes_per_epoch: Optional[int] = None
    batch_size: int = 8
    shots: int = 1
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    use_cyc: bool = True
    use_align: bool = True
    freeze_backbone: bool = True
    precision: str = "float32"
    channels: Tuple[int, ...] = (16, 32, 64)
    tau: float = 10.0
    eps: float = DEFAULT_EPS
    bank_lambda: float = 0.99
    adapter_reduction: int = 4
    adapter_scale: float = 1.0
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if isinstance(self.perturb, dict):
            self.perturb = PerturbConfig.from_dict(self.perturb)
        if self.epochs_baseline < 0 or self.epochs_adapter < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.baseline_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.shots < 1:
            raise ValueError("batch_size and shots must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["perturb"] = self.perturb.to_dict()
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def new_model(self) -> FewShotModel:
        return FewShotModel.create(self.channels, self.seed, self.perturb, self.adapter_reduction,
                                   self.adapter_scale, self.bank_lambda, self.tau, self.eps)


# -- checkpoints -------------------------------------------------------------------

def save_model(path, model: FewShotModel, progress: Dict[str, int]) -> None:
    entries = model.to_entries()
    for k, v in sorted(progress.items()):
        entries[f"meta.{k}"] = np.array([float(v)])
    checkpoint.save(path, entries)


def load_model(path, cfg: TrainConfig) -> Tuple[FewShotModel, Dict[str, int]]:
    entries = checkpoint.load(path)
    with precision(cfg.precision):
        model = cfg.new_model()
    model.load_entries(entries)
    progress = {k[5:]: int(v[0]) for k, v in entries.items() if k.startswith("meta.")}
    return model, progress


# -- training ------------------------------------------------------------------

def _episodes_per_epoch(cfg: TrainConfig, pool: SamplePool) -> int:
    return cfg.episodes_per_epoch if cfg.episodes_per_epoch is not None else len(pool)


def _step_row(phase: str, step: int, values: Dict[str, float]) -> Dict[str, str]:
    return {"phase": phase, "step": str(step), **{k: repr(float(v)) for k, v in values.items()}}


def train_baseline(cfg: TrainConfig, pool: SamplePool, model: FewShotModel,
                   start_epoch: int = 0) -> List[Dict[str, str]]:
    """Encoder + matching head under BCE only; the bank tracks clean features."""
    rows: List[Dict[str, str]] = []
    opt = SGD(list(model.encoder.parameters()), cfg.baseline_lr, cfg.momentum)
    per_epoch = _episodes_per_epoch(cfg, pool)
    with precision(cfg.precision):
        for epoch in range(start_epoch, cfg.epochs_baseline):
            rng = np.random.default_rng([cfg.seed, 0, epoch])
            for batch in episode_stream(pool, per_epoch, cfg.batch_size, cfg.shots, rng):
                step = len(rows)
                opt.zero_grad()
                res = _guarded(run_batch, "baseline", step, batch, model, RunMode.BASELINE_TRAIN)
                _check_loss(res.loss.total, "baseline", step)
                res.loss.total.backward()
                opt.step()
                rows.append(_step_row("baseline", step, res.loss.values()))
    return rows


def train_adapter(cfg: TrainConfig, pool: SamplePool, model: FewShotModel,
                  start_epoch: int = 0) -> List[Dict[str, str]]:
    """Adapter training on perturbed source features under BCE + cyc + align."""
    rows: List[Dict[str, str]] = []
    params = list(model.adapter.parameters())
    backbone = list(model.encoder.parameters())
    if not cfg.freeze_backbone:
        params += backbone
    for p in backbone:
        p.requires_grad = not cfg.freeze_backbone
    opt = SGD(params, cfg.lr, cfg.momentum)
    per_epoch = _episodes_per_epoch(cfg, pool)
    try:
        with precision(cfg.precision):
            for epoch in range(start_epoch, cfg.epochs_adapter):
                rng = np.random.default_rng([cfg.seed, 1, epoch])
                for batch in episode_stream(pool, per_epoch, cfg.batch_size, cfg.shots, rng):
                    step = len(rows)
                    opt.zero_grad()
                    res = _guarded(run_batch, "adapter", step, batch, model, RunMode.ADAPTER_TRAIN, rng,
                                   use_cyc=cfg.use_cyc, use_align=cfg.use_align)
                    _check_loss(res.loss.total, "adapter", step)
                    res.loss.total.backward()
                    opt.step()
                    rows.append(_step_row("adapter", step, res.loss.values()))
    finally:
        for p in backbone:
            p.requires_grad = True
    return rows


def _guarded(fn, phase: str, step: int, *args, **kw):
    try:
        return fn(*args, **kw)
    except NonFiniteError as e:
        raise TrainingError(f"non-finite {phase} loss at step {step}: {e}") from None


def _check_loss(total, phase: str, step: int) -> None:
    if not np.isfinite(total.data).all():
        raise TrainingError(f"non-finite {phase} loss at step {step}")


# -- post-baseline calibration ------------------------------------------------------

def calibrate_scales(model: FewShotModel, images: np.ndarray, target: float = 1.0) -> List[float]:
    """Rescale each stage so its mean channel mean on ``images`` is ``target``.

    Stage ``s`` output is multiplied by ``c`` through its second conv; every
    downstream bias is multiplied by the same ``c`` so the rest of the network
    only sees a global rescale.  Cosine matching is scale free, so predictions
    are unchanged.  Returns the factors.
    """
    from .model import encode
    from .tensor import Tensor, no_grad

    enc = model.encoder
    factors = []
    for s in range(len(enc.channels)):
        with no_grad():
            _, trace = encode(Tensor(images), enc, stop_after=s)
        m = float(trace[s].F_o.mu.data.mean())
        if not np.isfinite(m) or m <= 0:
            raise TrainingError(f"stage {s} is dead (mean activation {m})")
        c = target / m
        st = enc.stages[s]
        st["wb"].data *= c
        st["bb"].data *= c
        for t in range(s + 1, len(enc.channels)):
            enc.stages[t]["ba"].data *= c
            enc.stages[t]["bb"].data *= c
        factors.append(c)
    return factors


def refresh_bank(model: FewShotModel, images: np.ndarray, batch_size: int = 16) -> None:
    """Rebuild the datum bank from clean passes with the final weights.

    The running bank mixes statistics from every training step, most of them
    from earlier weights; after calibration it is stale too.
    """
    from .model import encode
    from .perturb import GlobalStatsBank, update_bank
    from .stats import channel_stats
    from .tensor import Tensor, no_grad

    model.bank = GlobalStatsBank(model.bank.lam)
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, trace = encode(Tensor(images[i:i + batch_size]), model.encoder)
            for s, tr in enumerate(trace):
                update_bank(model.bank, tr.F_o, s)


def pool_images(pool: SamplePool, n: int, seed: int) -> np.ndarray:
    allimgs = [img for cls in sorted(pool.by_class) for img, _ in pool.by_class[cls]]
    rng = np.random.default_rng([seed, 2])
    idx = rng.choice(len(allimgs), size=min(n, len(allimgs)), replace=False)
    return np.stack([allimgs[i] for i in idx])


def finalize_baseline(cfg: TrainConfig, pool: SamplePool, model: FewShotModel,
                      n_images: int = 256) -> None:
    with precision(cfg.precision):
        imgs = pool_images(pool, n_images, cfg.seed)
        calibrate_scales(model, imgs[:64])
        refresh_bank(model, imgs)


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    style_id: str
    shots: int
    rectify: bool
    miou: float
    rows: List[Dict[str, str]]


def _predict(model: FewShotModel, episodes: Sequence[Episode], rectify: bool,
             batch_size: int, dtype: str):
    preds, rows = [], []
    with precision(dtype):
        for i in range(0, len(episodes), batch_size):
            chunk = episodes[i:i + batch_size]
            res = run_batch(chunk, model, RunMode.EVAL, rectify=rectify)
            for ep, pm, bce in zip(chunk, predict_masks(res), res.bce_per_episode):
                preds.append(pm)
                rows.append({"episode_id": ep.episode_id, "class_id": str(ep.class_id),
                             "style_id": ep.style_id, "shots": str(ep.shots),
                             "iou": repr(iou(pm, ep.query[1][0])), "l_bce": repr(float(bce))})
    return preds, rows


_WORKER_STATE: dict = {}


def _predict_worker(span):
    model, episodes, rectify, batch_size, dtype = _WORKER_STATE["args"]
    lo, hi = span
    return _predict(model, episodes[lo:hi], rectify, batch_size, dtype)


def evaluate(model: FewShotModel, episodes: Sequence[Episode], rectify: bool,
             batch_size: int = 16, dtype: str = "float32", jobs: int = 1) -> EvalResult:
    """Run every episode; ``jobs > 1`` forks workers over contiguous chunks.

    Chunks are rejoined in episode order and each episode is computed the same
    way regardless of the split, so the result does not depend on ``jobs``.
    """
    if not episodes:
        raise ValueError("no episodes to evaluate")
    if jobs > 1:
        import multiprocessing as mp

        n = len(episodes)
        # split on batch boundaries so each batch is the same as in the serial run
        nb = -(-n // batch_size)
        per = -(-nb // jobs) * batch_size
        spans = [(lo, min(lo + per, n)) for lo in range(0, n, per)]
        _WORKER_STATE["args"] = (model, episodes, rectify, batch_size, dtype)
        try:
            with mp.get_context("fork").Pool(min(jobs, len(spans))) as pool:
                parts = pool.map(_predict_worker, spans)
        finally:
            _WORKER_STATE.clear()
        preds = [p for part in parts for p in part[0]]
        rows = [r for part in parts for r in part[1]]
    else:
        preds, rows = _predict(model, episodes, rectify, batch_size, dtype)
    gts = [ep.query[1][0] for ep in episodes]
    classes = [ep.class_id for ep in episodes]
    ep0 = episodes[0]
    return EvalResult(ep0.style_id, ep0.shots, rectify, miou(preds, gts, classes), rows)


def write_csv(path, fieldnames: Sequence[str], rows: Iterable[Dict[str, str]]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def summary_rows(results: Sequence[EvalResult]) -> List[Dict[str, str]]:
    return [{"style_id": r.style_id, "shots": str(r.shots), "rectify": str(int(r.rectify)),
             "miou": f"{r.miou:.6f}", "episodes": str(len(r.rows))} for r in results]


# -- channel statistics dump ----------------------------------------------------------

def stage_stats_table(model: FewShotModel, images: np.ndarray, stage: int,
                      batch_size: int = 32, dtype: str = "float32") -> Tuple[np.ndarray, np.ndarray]:
    """Per-image clean channel (mu, sigma) at ``stage`` -> two [N,C] arrays."""
    from .model import encode
    from .tensor import Tensor, no_grad

    if not 0 <= stage < len(model.encoder.channels):
        raise ValueError(f"stage must be in [0, {len(model.encoder.channels) - 1}]")
    if len(images) == 0:
        raise ValueError("no images")
    mus, sigmas = [], []
    with precision(dtype), no_grad():
        for i in range(0, len(images), batch_size):
            _, trace = encode(Tensor(images[i:i + batch_size]), model.encoder, stop_after=stage)
            mus.append(trace[stage].F_o.mu.data)
            sigmas.append(trace[stage].F_o.sigma.data)
    return np.concatenate(mus).astype(np.float64), np.concatenate(sigmas).astype(np.float64)
