"""Property suites run at 64-bit: algebra, statistics oracle, cyclic oracle, gradient checks, bank."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as Fn
from . import tensor as T
from .adapter import RectAdapter, RectificationFactors, predict_factors, rectify
from .losses import cyclic_chain, stats_l1, total_loss
from .perturb import GlobalStatsBank, Mode, perturb_global, perturb_local, update_bank
from .stats import DEFAULT_EPS, ChannelStats, adain, channel_stats
from .tensor import Tensor, precision

SUITES = ("algebra", "stats-oracle", "cyclic", "gradcheck", "bank")


@dataclass
class Check:
    name: str
    max_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tol)


@dataclass
class SuiteReport:
    suite: str
    checks: List[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, err: float, tol: float) -> None:
        self.checks.append(Check(name, float(err), tol))

    def lines(self) -> List[str]:
        out = [f"[{'PASS' if c.ok else 'FAIL'}] {self.suite}/{c.name}: max error {c.max_error:.3e} (tol {c.tol:.0e})"
               for c in self.checks]
        out.append(f"{self.suite}: {'PASS' if self.passed else 'FAIL'} in {self.seconds:.2f}s")
        return out


def _random_map(rng: np.random.Generator, max_dims=(4, 8, 16, 16), offset: float = 0.0) -> np.ndarray:
    shape = tuple(int(rng.integers(1, d + 1)) for d in max_dims)
    # avoid a 1x1 spatial extent, where sigma collapses to sqrt(eps)
    if shape[2] * shape[3] < 4:
        shape = shape[:2] + (2, 2)
    return rng.normal(offset, 1.0, size=shape) * rng.uniform(0.5, 2.0)


def _factor(rng, shape, lo=0.2, hi=3.0) -> np.ndarray:
    """alpha/beta such that 1 + factor lies in [lo, hi]."""
    return rng.uniform(lo, hi, size=shape) - 1.0


# -- reference (long) forms -------------------------------------------------------------

def perturb_long(F: np.ndarray, alpha, beta, eps: float = DEFAULT_EPS) -> np.ndarray:
    """AdaIN form: new sigma * normalized content + new mu, with sigma_p = (1+beta) sigma_o."""
    mu = F.mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(F.var(axis=(2, 3), keepdims=True) + eps)
    a = alpha[:, :, None, None]
    b = beta[:, :, None, None]
    return (1 + b) * sigma * (F - mu) / sigma + (1 + a) * mu


rectify_long = perturb_long


# -- oracles ------------------------------------------------------------------------------

def loop_stats(F: np.ndarray, eps: float):
    """Two-pass loop oracle for (mu, sigma) per (b, c)."""
    B, C, H, W = F.shape
    mu = np.zeros((B, C))
    sigma = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            s = 0.0
            for i in range(H):
                for j in range(W):
                    s += F[b, c, i, j]
            m = s / (H * W)
            v = 0.0
            for i in range(H):
                for j in range(W):
                    d = F[b, c, i, j] - m
                    v += d * d
            mu[b, c] = m
            sigma[b, c] = np.sqrt(v / (H * W) + eps)
    return mu, sigma


def loop_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int, pad: int) -> np.ndarray:
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(Cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def oracle_inverse(alpha, beta) -> RectificationFactors:
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)
    b = np.asarray(beta.data if isinstance(beta, Tensor) else beta)
    return RectificationFactors(Tensor(1.0 / (1.0 + a) - 1.0), Tensor(1.0 / (1.0 + b) - 1.0))


class OracleAdapter:
    """Emits the factors that map any incoming map's stats back to fixed clean stats.

    For a local perturbation these are exactly 1/(1+alpha)-1 and 1/(1+beta)-1;
    for a global one they also absorb the bank offset.
    """

    def __init__(self, clean: Dict[int, ChannelStats]):
        self.clean = clean

    def factors(self, F: Tensor, stage: int) -> RectificationFactors:
        ref = self.clean[stage]
        x = F.data
        mu = x.mean(axis=(2, 3))
        var = x.var(axis=(2, 3))
        var_o = ref.sigma.data ** 2 - ref.eps
        a = ref.mu.data / mu - 1.0
        b = np.sqrt(var_o / var) - 1.0
        return RectificationFactors(Tensor(a), Tensor(b))


# -- finite differences ------------------------------------------------------------------

def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
              h: float = 1e-6) -> float:
    """Max relative error over all inputs of d<fn(inputs), R>/d input vs central differences."""
    arrs = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar() -> float:
        out = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data * probe))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    out = fn(*ts)
    probe = rng.normal(size=out.shape)
    (out * Tensor(probe)).sum().backward()
    worst = 0.0
    for t, a in zip(ts, arrs):
        num = numeric_grad(scalar, a, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


# -- suites --------------------------------------------------------------------------------

def suite_algebra(seed: int = 0, n: int = 100) -> SuiteReport:
    rep = SuiteReport("algebra")
    rng = np.random.default_rng(seed)
    e_pert = e_rect = e_stats = 0.0
    for _ in range(n):
        F = _random_map(rng)
        B, C = F.shape[:2]
        a = rng.normal(0, 0.75, size=(B, C))
        b = np.maximum(rng.normal(0, 1.0, size=(B, C)), -0.95)
        short = perturb_local(Tensor(F), Tensor(a), Tensor(b)).data
        e_pert = max(e_pert, np.abs(short - perturb_long(F, a, b)).max())
        ar = rng.uniform(-1, 1, size=(B, C))
        br = rng.uniform(-1, 1, size=(B, C)) * 0.99
        short = rectify(Tensor(F), RectificationFactors(Tensor(ar), Tensor(br))).data
        e_rect = max(e_rect, np.abs(short - rectify_long(F, ar, br)).max())
        st = channel_stats(Tensor(short))
        e_stats = max(e_stats, np.abs(st.mu.data - (1 + ar) * F.mean(axis=(2, 3))).max())
    rep.add("perturb short form == AdaIN form", e_pert, 1e-10)
    rep.add("rectify short form == AdaIN form", e_rect, 1e-10)
    rep.add("mu(rectified) == (1+alpha_rect) mu", e_stats, 1e-10)
    return rep


def suite_stats_oracle(seed: int = 0, n: int = 50) -> SuiteReport:
    rep = SuiteReport("stats-oracle")
    rng = np.random.default_rng(seed)
    e_mu = e_sig = e_adain = 0.0
    for _ in range(n):
        F = _random_map(rng, (3, 5, 8, 8), offset=rng.normal())
        eps = float(rng.choice([1e-5, 1e-3, 1e-8]))
        st = channel_stats(Tensor(F), eps)
        mu, sigma = loop_stats(F, eps)
        e_mu = max(e_mu, np.abs(st.mu.data - mu).max())
        e_sig = max(e_sig, np.abs(st.sigma.data - sigma).max())
        dst = ChannelStats(Tensor(rng.normal(size=mu.shape)), Tensor(rng.uniform(0.5, 2, size=mu.shape)), eps)
        out = adain(Tensor(F), st, dst)
        # content preservation
        lhs = (out.data - dst.mu.data[:, :, None, None]) / dst.sigma.data[:, :, None, None]
        rhs = (F - mu[:, :, None, None]) / sigma[:, :, None, None]
        e_adain = max(e_adain, np.abs(lhs - rhs).max())
    rep.add("mu vs loop oracle", e_mu, 1e-12)
    rep.add("sigma vs loop oracle", e_sig, 1e-12)
    rep.add("adain content preservation", e_adain, 1e-12)
    return rep


def suite_inverse(seed: int = 0, n: int = 100) -> SuiteReport:
    """Oracle factors undo a local perturbation, in stats and elementwise."""
    rep = SuiteReport("inverse")
    rng = np.random.default_rng(seed)
    e_mu = e_sig = e_F = 0.0
    for _ in range(n):
        F = _random_map(rng, offset=rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0))
        B, C = F.shape[:2]
        a = _factor(rng, (B, C))
        b = _factor(rng, (B, C))
        F_p = perturb_local(Tensor(F), Tensor(a), Tensor(b))
        F_r = rectify(F_p, oracle_inverse(a, b))
        s0 = channel_stats(Tensor(F))
        s1 = channel_stats(F_r)
        e_mu = max(e_mu, (np.abs(s1.mu.data - s0.mu.data) / np.maximum(np.abs(s0.mu.data), 1e-12)).max())
        e_sig = max(e_sig, (np.abs(s1.sigma.data - s0.sigma.data) / s0.sigma.data).max())
        scale = np.abs(F).max(axis=(2, 3), keepdims=True)
        e_F = max(e_F, (np.abs(F_r.data - F) / scale).max())
    rep.add("mu restored (relative)", e_mu, 1e-6)
    rep.add("sigma restored (relative)", e_sig, 1e-6)
    rep.add("F restored (relative)", e_F, 1e-6)
    return rep


def suite_cyclic(seed: int = 0, n: int = 50) -> SuiteReport:
    rep = suite_inverse(seed)
    rep.suite = "cyclic"
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    worst_stats = 0.0
    for i in range(n):
        F = _random_map(rng, (4, 8, 12, 12), offset=rng.uniform(0.5, 2.0))
        B, C = F.shape[:2]
        a = _factor(rng, (B, C))
        b = _factor(rng, (B, C))
        F_o = Tensor(F)
        clean = channel_stats(F_o)
        bank = GlobalStatsBank(0.99)
        bank.set(0, clean.mu.data.mean(axis=0) * rng.uniform(0.5, 1.5, size=C))
        mode = Mode.LOCAL if i % 2 == 0 else Mode.GLOBAL
        r1, r2 = cyclic_chain(F_o, Tensor(a), Tensor(b), mode, bank, OracleAdapter({0: clean}), 0)
        s1, s2 = channel_stats(r1), channel_stats(r2)
        lb = total_loss(Tensor(np.zeros((B, 1, 4, 4))), np.zeros((B, 1, 4, 4)), [clean], [s1], [s2])
        worst = max(worst, lb.l_cyc.item() + lb.l_align.item())
        rel = max((np.abs(s2.mu.data - clean.mu.data) / np.abs(clean.mu.data)).max(),
                  (np.abs(s2.sigma.data - clean.sigma.data) / clean.sigma.data).max())
        worst_stats = max(worst_stats, rel)
    rep.add("oracle adapter L_cyc + L_align", worst, 1e-8)
    rep.add("stats(F'_rect) == stats(F_o) (relative)", worst_stats, 1e-6)
    return rep


def _tiny_chain_loss(seed: int):
    """Full perturb -> rectify -> re-perturb -> re-rectify -> loss on a tiny config,
    as a function of (F_o, adapter w1, adapter w2, logits)."""
    rng = np.random.default_rng(seed)
    B, C = 2, 4
    ad = RectAdapter({0: C}, reduction=2, rng=rng)
    ad.params[0]["w2"].data = rng.normal(0, 0.3, size=ad.params[0]["w2"].shape)
    ad.params[0]["b1"].data = rng.normal(0, 0.1, size=ad.params[0]["b1"].shape)
    alpha = Tensor(rng.normal(0, 0.3, size=(B, C)))
    beta = Tensor(rng.normal(0, 0.3, size=(B, C)))
    bank = GlobalStatsBank(0.99)
    bank.set(0, rng.uniform(0.5, 1.5, size=C))
    mask = (rng.uniform(size=(B, 1, 6, 6)) > 0.5).astype(np.float64)
    modes = [Mode.LOCAL, Mode.GLOBAL]
    F0 = rng.normal(1.0, 1.0, size=(B, C, 5, 5))
    logits0 = rng.normal(size=(B, 1, 3, 3))
    # training detaches the clean targets; hold them fixed here for the same reason
    st_o = channel_stats(Tensor(F0))

    def fn(F, w1, w2, logits):
        ad.params[0]["w1"] = w1
        ad.params[0]["w2"] = w2
        r1, r2 = cyclic_chain(F, alpha, beta, modes, bank, ad, 0)
        up = Fn.upsample_bilinear(logits * r1.mean(), (6, 6))
        loss = total_loss(up, mask, [st_o], [channel_stats(r1)], [channel_stats(r2)])
        return loss.total

    w1 = ad.params[0]["w1"].data.copy()
    w2 = ad.params[0]["w2"].data.copy()
    return fn, [F0, w1, w2, logits0]


def gradcheck_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (fn, inputs). Inputs are kept away from kinks (relu/abs at 0, pool ties, clamps)."""
    def away(shape, lo=0.2):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < lo, np.sign(x) * lo + x, x)

    pos = lambda shape: rng.uniform(0.5, 2.0, size=shape)
    C = 3
    cases = {
        "add": (lambda a, b: a + b, [away((2, C, 3, 3)), away((C,))]),
        "sub": (lambda a, b: a - b, [away((2, C, 3, 3)), away((2, C))]),
        "mul": (lambda a, b: a * b, [away((2, C, 3, 3)), away((C,))]),
        "div": (lambda a, b: a / b, [away((2, 3)), pos((2, 3))]),
        "scalar_mul": (lambda a: T.scalar_mul(a, -1.7), [away((4,))]),
        "power": (lambda a: T.power(a, 3.0), [away((5,))]),
        "relu": (T.relu, [away((3, 4))]),
        "sigmoid": (T.sigmoid, [away((3, 4))]),
        "tanh": (T.tanh, [away((3, 4))]),
        "exp": (T.exp, [away((3, 4))]),
        "log": (T.log, [pos((3, 4))]),
        "sqrt": (T.sqrt, [pos((3, 4))]),
        "abs": (T.abs_, [away((3, 4))]),
        "sum": (lambda a: T.sum_(a, axis=(0, 2)), [away((2, 3, 4))]),
        "mean": (lambda a: T.mean(a, axis=1, keepdims=True), [away((2, 3, 4))]),
        "reshape": (lambda a: T.reshape(a, (6, 2)) * Tensor(np.arange(12.0).reshape(6, 2)), [away((3, 4))]),
        "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [away((2, 3, 2))]),
        "getitem": (lambda a: a[:, 1:3] * 2.0, [away((2, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [away((2, 2)), away((2, 3))]),
        "stack": (lambda a, b: T.stack([a, b], axis=0), [away((2, 2)), away((2, 2))]),
        "matmul": (T.matmul, [away((3, 4)), away((4, 2))]),
        "conv2d": (lambda x, w, b: Fn.conv2d(x, w, b, stride=1, pad=1),
                   [away((2, 2, 5, 5)), away((3, 2, 3, 3)), away((3,))]),
        "conv2d_stride2": (lambda x, w, b: Fn.conv2d(x, w, b, stride=2, pad=1),
                           [away((1, 2, 6, 6)), away((2, 2, 3, 3)), away((2,))]),
        "reduce_mean_hw": (Fn.reduce_mean_hw, [away((2, 3, 4, 4))]),
        "reduce_mean_all": (Fn.reduce_mean_all, [away((2, 3, 4, 4))]),
        "avg_pool2d": (lambda x: Fn.avg_pool2d(x, 2), [away((1, 2, 4, 4))]),
        "max_pool2d": (lambda x: Fn.max_pool2d(x, 2), [rng.permutation(32).reshape(1, 2, 4, 4) * 0.1]),
        "linear": (Fn.linear, [away((2, 5)), away((3, 5)), away((3,))]),
        "upsample_bilinear": (lambda x: Fn.upsample_bilinear(x, (7, 5)), [away((1, 2, 3, 4))]),
        "bce_with_logits": (lambda x: Fn.bce_with_logits(x, (rng_mask > 0.5).astype(np.float64)),
                            [away((2, 1, 3, 3))]),
        "channel_stats": (lambda F: T.concat([channel_stats(F).mu, channel_stats(F).sigma], axis=1),
                          [away((2, C, 4, 4))]),
        "adain": (lambda F, m, s: adain(F, channel_stats(F), ChannelStats(m, s)),
                  [away((2, C, 3, 3)), away((2, C)), pos((2, C))]),
        "perturb_local": (lambda F, a, b: perturb_local(F, a, b),
                          [away((2, C, 3, 3)), away((2, C)) * 0.3, away((2, C)) * 0.3]),
        "perturb_global": (lambda F, a, b: perturb_global(F, a, b, _bank(C), 0),
                           [away((2, C, 3, 3)), away((2, C)) * 0.3, away((2, C)) * 0.3]),
        "rectify": (lambda F, a, b: rectify(F, RectificationFactors(a, b)),
                    [away((2, C, 3, 3)), away((2, C)) * 0.3, away((2, C)) * 0.3]),
        "stats_l1": (lambda F, G: stats_l1(channel_stats(F), channel_stats(G)),
                     [away((2, C, 3, 3)), away((2, C, 3, 3)) + 3.0]),
        "predict_factors": (_predict_fn(C, rng), [away((2, C, 4, 4)) + 1.0]),
    }
    rng_mask = rng.uniform(size=(2, 1, 3, 3))
    return cases


def _bank(C: int) -> GlobalStatsBank:
    bank = GlobalStatsBank(0.99)
    bank.set(0, np.linspace(0.5, 1.5, C))
    return bank


def _predict_fn(C: int, rng: np.random.Generator):
    ad = RectAdapter({0: C}, reduction=1, rng=rng)
    ad.params[0]["w2"].data = rng.normal(0, 0.5, size=ad.params[0]["w2"].shape)

    def fn(F):
        f = predict_factors(F, ad, 0)
        return T.concat([f.alpha_rect, f.beta_rect], axis=1)
    return fn


def suite_gradcheck(seed: int = 0, tol: float = 1e-4) -> SuiteReport:
    rep = SuiteReport("gradcheck")
    rng = np.random.default_rng(seed)
    for name, (fn, inputs) in gradcheck_cases(rng).items():
        rep.add(name, gradcheck(fn, inputs, rng), tol)
    fn, inputs = _tiny_chain_loss(seed)
    rep.add("perturb->rectify->loss chain", gradcheck(fn, inputs, rng), tol)
    return rep


def suite_bank(seed: int = 0) -> SuiteReport:
    """|mu_datum - m| <= lam^N |init - m| after N constant updates."""
    rep = SuiteReport("bank")
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for lam in (0.9, 0.99):
        for N in (1, 2, 5, 10, 50, 100):
            C = 6
            init = rng.normal(size=C)
            m = rng.normal(size=C)
            bank = GlobalStatsBank(lam, init_from_first=False)
            bank.set(0, init.copy())
            st = ChannelStats(Tensor(m[None, :]), Tensor(np.ones((1, C))), DEFAULT_EPS)
            for _ in range(N):
                update_bank(bank, st, 0)
            gap = np.abs(bank.get(0) - m) - lam ** N * np.abs(init - m)
            # rounding slack of a few ulps per update
            worst = max(worst, float(gap.max()) - 1e-13 * N)
    rep.add("geometric convergence (excess over bound)", max(worst, 0.0), 1e-15)
    return rep


_RUNNERS = {
    "algebra": suite_algebra,
    "stats-oracle": suite_stats_oracle,
    "cyclic": suite_cyclic,
    "gradcheck": suite_gradcheck,
    "bank": suite_bank,
}


def run_suite(name: str, seed: int = 0) -> SuiteReport:
    if name not in _RUNNERS:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    t0 = time.perf_counter()
    with precision(np.float64):
        rep = _RUNNERS[name](seed)
    rep.seconds = time.perf_counter() - t0
    return rep
