"""Style synthesis by perturbing channel statistics.

Local perturbation rescales an image's own channel mean and std; global
perturbation uses the dataset-level mean held in a :class:`GlobalStatsBank`
as the mean reference instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np

from .stats import ChannelStats, channel_stats
from .tensor import ShapeError, Tensor, get_default_dtype

BETA_FLOOR = -0.95


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BETA = "beta"
    UNIFORM = "uniform"


class Mode(str, enum.Enum):
    NONE = "none"
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.GAUSSIAN
    std: float = 0.75
    a: float = 3.0
    b: float = 4.0
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is NoiseKind.GAUSSIAN and not self.std > 0:
            raise ValueError(f"gaussian std must be > 0, got {self.std}")
        if self.kind is NoiseKind.BETA and not (self.a > 0 and self.b > 0):
            raise ValueError(f"beta shape parameters must be > 0, got ({self.a}, {self.b})")
        if self.kind is NoiseKind.UNIFORM and not self.lo < self.hi:
            raise ValueError(f"uniform needs lo < hi, got [{self.lo}, {self.hi})")

    @classmethod
    def gaussian(cls, std: float) -> "NoiseSpec":
        return cls(NoiseKind.GAUSSIAN, std=std)

    @classmethod
    def beta(cls, a: float, b: float) -> "NoiseSpec":
        return cls(NoiseKind.BETA, a=a, b=b)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "NoiseSpec":
        return cls(NoiseKind.UNIFORM, lo=lo, hi=hi)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.kind is NoiseKind.GAUSSIAN:
            d["std"] = self.std
        elif self.kind is NoiseKind.BETA:
            d.update(a=self.a, b=self.b)
        else:
            d.update(lo=self.lo, hi=self.hi)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseSpec":
        return cls(**dict(d))


@dataclass(frozen=True)
class PerturbConfig:
    p_local: float = 0.5
    p_global: float = 0.5
    local_noise: NoiseSpec = field(default_factory=lambda: NoiseSpec.gaussian(0.75))
    global_noise: NoiseSpec = field(default_factory=lambda: NoiseSpec.gaussian(1.0))
    stages: FrozenSet[int] = frozenset({0, 1, 2})

    def __post_init__(self):
        object.__setattr__(self, "stages", frozenset(int(s) for s in self.stages))
        for name in ("p_local", "p_global"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if (self.p_local > 0 or self.p_global > 0) and not self.stages:
            raise ValueError("perturbation enabled but no stages selected")

    def to_dict(self) -> dict:
        return {
            "p_local": self.p_local,
            "p_global": self.p_global,
            "local_noise": self.local_noise.to_dict(),
            "global_noise": self.global_noise.to_dict(),
            "stages": sorted(self.stages),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PerturbConfig":
        return cls(
            p_local=d["p_local"],
            p_global=d["p_global"],
            local_noise=NoiseSpec.from_dict(d["local_noise"]),
            global_noise=NoiseSpec.from_dict(d["global_noise"]),
            stages=frozenset(d["stages"]),
        )


class GlobalStatsBank:
    """Momentum-averaged dataset channel means, one [C] vector per stage."""

    def __init__(self, lam: float = 0.99, init_from_first: bool = True):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"momentum factor must be in [0, 1], got {lam}")
        self.lam = lam
        self.init_from_first = init_from_first
        self.mu_datum: Dict[int, np.ndarray] = {}

    def initialized(self, stage: int) -> bool:
        return stage in self.mu_datum

    def set(self, stage: int, value) -> None:
        self.mu_datum[stage] = np.array(value, dtype=np.float64).reshape(-1)

    def get(self, stage: int) -> np.ndarray:
        if stage not in self.mu_datum:
            raise KeyError(f"global stats bank has no entry for stage {stage}")
        return self.mu_datum[stage]

    def update(self, stage: int, mu: np.ndarray) -> None:
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        if stage not in self.mu_datum:
            if self.init_from_first:
                self.mu_datum[stage] = mu.copy()
                return
            self.mu_datum[stage] = np.zeros_like(mu)
        cur = self.mu_datum[stage]
        if cur.shape != mu.shape:
            raise ShapeError(f"stage {stage}: bank has {cur.shape}, update has {mu.shape}")
        self.mu_datum[stage] = self.lam * cur + (1.0 - self.lam) * mu

    def to_entries(self) -> Dict[str, np.ndarray]:
        return {f"bank.stage{s}.mu_datum": v.astype(np.float64)
                for s, v in sorted(self.mu_datum.items())}

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray], lam: float = 0.99) -> "GlobalStatsBank":
        bank = cls(lam)
        for name, arr in entries.items():
            if name.startswith("bank.stage") and name.endswith(".mu_datum"):
                bank.set(int(name[len("bank.stage"):-len(".mu_datum")]), arr)
        return bank

    def copy(self) -> "GlobalStatsBank":
        other = GlobalStatsBank(self.lam, self.init_from_first)
        other.mu_datum = {s: v.copy() for s, v in self.mu_datum.items()}
        return other


@dataclass
class PerturbOutcome:
    F_p: Tensor
    alpha: Tensor
    beta: Tensor
    mode: Mode


def sample_noise(spec: NoiseSpec, shape, rng: np.random.Generator) -> Tensor:
    """i.i.d. draws from ``spec``; Beta samples are returned raw, in (0, 1)."""
    if spec.kind is NoiseKind.GAUSSIAN:
        vals = rng.normal(0.0, spec.std, size=shape)
    elif spec.kind is NoiseKind.BETA:
        vals = rng.beta(spec.a, spec.b, size=shape)
    else:
        vals = rng.uniform(spec.lo, spec.hi, size=shape)
        # keep the half-open interval after rounding to the working precision
        dt = get_default_dtype()
        vals = np.minimum(vals.astype(dt), np.nextafter(dt(spec.hi), dt(spec.lo)))
    return Tensor(vals)


def update_bank(bank: GlobalStatsBank, stats: ChannelStats, stage: int) -> GlobalStatsBank:
    """Fold a batch of clean-feature means into the bank (batch-averaged first)."""
    mu = stats.mu.data
    if mu.ndim == 2:
        mu = mu.mean(axis=0)
    bank.update(stage, mu)
    return bank


def perturb(F: Tensor, alpha: Tensor, beta: Tensor, ref: Tensor) -> Tensor:
    """(1 + beta) * F + (alpha - beta) * ref, all factors per channel."""
    for name, t in (("alpha", alpha), ("beta", beta), ("ref", ref)):
        if t.shape[-1] != F.shape[1]:
            raise ShapeError(f"{name} shape {t.shape} does not match {F.shape[1]} channels")
    return (1.0 + beta) * F + (alpha - beta) * ref


def perturb_local(F_o: Tensor, alpha: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return perturb(F_o, alpha, beta, channel_stats(F_o, eps).mu)


def perturb_global(F_o: Tensor, alpha: Tensor, beta: Tensor, bank: GlobalStatsBank,
                   stage: int) -> Tensor:
    if not bank.initialized(stage):
        raise KeyError(f"global stats bank not initialised for stage {stage}")
    return perturb(F_o, alpha, beta, Tensor(bank.get(stage)))


def perturb_rows(F_o: Tensor, alpha: Tensor, beta: Tensor, modes: Sequence[Mode],
                 bank: Optional[GlobalStatsBank], stage: int, eps: float = 1e-5) -> Tensor:
    """Batched perturbation with per-row [B,C] factors and per-row mode.

    Rows in GLOBAL mode take the bank mean as reference, LOCAL rows their own
    mean; NONE rows must carry zero factors.
    """
    B = F_o.shape[0]
    if len(modes) != B:
        raise ShapeError(f"{len(modes)} modes for a batch of {B}")
    is_global = np.array([m is Mode.GLOBAL for m in modes], dtype=F_o.dtype)[:, None]
    ref = channel_stats(F_o, eps).mu * Tensor(1.0 - is_global)
    if is_global.any():
        ref = ref + Tensor(is_global * bank.get(stage)[None, :])
    return perturb(F_o, alpha, beta, ref)


def draw_factors(cfg: PerturbConfig, channels: int, stage: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, Mode]:
    """Gate (local first, then global) and sample per-channel (alpha, beta)."""
    zeros = np.zeros(channels)
    if stage not in cfg.stages:
        return zeros, zeros.copy(), Mode.NONE
    if rng.random() < cfg.p_local:
        mode, spec = Mode.LOCAL, cfg.local_noise
    elif rng.random() < cfg.p_global:
        mode, spec = Mode.GLOBAL, cfg.global_noise
    else:
        return zeros, zeros.copy(), Mode.NONE
    alpha = sample_noise(spec, channels, rng).data.astype(np.float64)
    beta = sample_noise(spec, channels, rng).data.astype(np.float64)
    return alpha, np.maximum(beta, BETA_FLOOR), mode


def gated_perturb(F_o: Tensor, cfg: PerturbConfig, bank: Optional[GlobalStatsBank], stage: int,
                  rng: Optional[np.random.Generator],
                  shared: Optional[Tuple[Tensor, Tensor, Mode]] = None) -> PerturbOutcome:
    """Perturb one episode's features; pass ``shared`` to reuse support-side factors."""
    if shared is not None:
        alpha, beta, mode = shared
        alpha, beta = Tensor(alpha), Tensor(beta)
    else:
        a, b, mode = draw_factors(cfg, F_o.shape[1], stage, rng)
        alpha, beta = Tensor(a), Tensor(b)
    if mode is Mode.NONE:
        return PerturbOutcome(F_o, alpha, beta, mode)
    if mode is Mode.LOCAL:
        F_p = perturb_local(F_o, alpha, beta)
    else:
        F_p = perturb_global(F_o, alpha, beta, bank, stage)
    return PerturbOutcome(F_p, alpha, beta, mode)
