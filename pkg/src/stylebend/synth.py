"""Procedural domain-shifted few-shot segmentation benchmark.

Each sample is one filled shape on a low-frequency sinusoidal background.
Shape kind and fill hue are fixed by the class; a domain style is a
pixel-level post-transform (gamma, per-channel gain and bias, sensor noise)
plus a background texture frequency multiplier, so it never touches the mask.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import netpbm
from .functional import resize_nearest

FG_FRACTION = (0.02, 0.60)
MAX_RETRIES = 50


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainStyle:
    style_id: str
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    texture_freq: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gain", tuple(float(g) for g in self.gain))
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ValueError("gain and bias need one value per RGB channel")
        if min(self.gain) <= 0:
            raise ValueError("gain must be positive")
        if not 0.3 <= self.gamma <= 3.0:
            raise ValueError("gamma must lie in [0.3, 3]")
        if self.texture_freq <= 0 or self.noise_std < 0:
            raise ValueError("texture_freq must be > 0 and noise_std >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.gain == (1.0, 1.0, 1.0) and self.bias == (0.0, 0.0, 0.0)
                and self.gamma == 1.0 and self.noise_std == 0.0)


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    kind: str
    hue: float
    size_range: Tuple[float, float] = (0.16, 0.34)
    rotation_range: Tuple[float, float] = (0.0, 2 * math.pi)
    stripe_freq: float = 4.0


SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "bar", "diamond", "ellipse",
               "hexagon", "star", "crescent", "lshape")

# class i: (kind, hue, stripe frequency); hues of the last four sit between the others
CLASS_TABLE = [
    ("circle", 0.00, 3.0), ("square", 0.125, 5.0), ("triangle", 0.25, 4.0), ("cross", 0.375, 6.0),
    ("ring", 0.50, 3.5), ("bar", 0.625, 5.5), ("diamond", 0.75, 4.5), ("ellipse", 0.875, 6.5),
    ("hexagon", 0.0625, 4.0), ("star", 0.3125, 5.0), ("crescent", 0.5625, 3.0), ("lshape", 0.8125, 6.0),
]


def shape_class(class_id: int) -> ShapeClass:
    kind, hue, stripes = CLASS_TABLE[class_id]
    return ShapeClass(class_id, kind, hue, stripe_freq=stripes)


def default_styles() -> Dict[str, DomainStyle]:
    return {
        "source": DomainStyle("source"),
        "target1": DomainStyle("target1", gain=(0.85, 0.95, 1.1), bias=(0.05, 0.0, -0.05),
                               gamma=1.2, texture_freq=1.25, noise_std=0.02),
        "target2": DomainStyle("target2", gain=(0.6, 0.75, 0.5), bias=(0.25, 0.1, 0.3),
                               gamma=0.7, texture_freq=1.6, noise_std=0.04),
        "target3": DomainStyle("target3", gain=(0.3, 0.25, 0.35), bias=(0.55, 0.6, 0.5),
                               gamma=1.8, texture_freq=2.0, noise_std=0.06),
    }


# -- rendering ---------------------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u * u + v * v
    if kind == "circle":
        return r2 <= 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if kind == "triangle":
        # vertices (0,-1), (0.866,0.5), (-0.866,0.5)
        return (v <= 0.5) & (np.sqrt(3.0) * u - v <= 1.0) & (-np.sqrt(3.0) * u - v <= 1.0)
    if kind == "cross":
        return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1.0))
    if kind == "ring":
        return (r2 <= 1.0) & (r2 >= 0.36)
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    if kind == "hexagon":
        au, av = np.abs(u), np.abs(v)
        return (av <= 0.866) & (au + av / np.sqrt(3.0) <= 1.0)
    if kind == "star":
        theta = np.arctan2(v, u)
        return np.sqrt(r2) <= 0.62 + 0.38 * np.cos(5 * theta)
    if kind == "crescent":
        return (r2 <= 1.0) & ((u - 0.5) ** 2 + v * v > 0.6)
    if kind == "lshape":
        return (((u >= -1) & (u <= 1) & (v >= 0.35) & (v <= 1))
                | ((u >= -1) & (u <= -0.35) & (v >= -1) & (v <= 1)))
    raise ValueError(f"unknown shape kind {kind!r}")


def render_content(cls: ShapeClass, rng: np.random.Generator, size: int = 64,
                   texture_freq: float = 1.0, min_cells: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Un-styled render: (image [3,S,S] in [0,1], mask [1,S,S] uint8).

    ``min_cells`` is the coarsest feature stride; the mask must keep at least
    one foreground and one background cell after nearest resizing to it.
    """
    if size < 32:
        raise ValueError("image size must be >= 32")
    ys, xs = np.mgrid[0:size, 0:size]
    y = (ys + 0.5) / size
    x = (xs + 0.5) / size

    # background: mixture of three oriented sinusoids on a muted tint
    base = 0.45 + 0.1 * rng.uniform(-1, 1, size=3)
    bg = np.repeat(base[:, None, None], size, axis=1).repeat(size, axis=2)
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(1.0, 3.0) * texture_freq
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.04, 0.1, size=3)
        wave = np.sin(2 * math.pi * freq * (x * math.cos(theta) + y * math.sin(theta)) + phase)
        bg = bg + amp[:, None, None] * wave[None]

    hue = (cls.hue + rng.uniform(-0.02, 0.02)) % 1.0
    fill = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 0.85), rng.uniform(0.75, 0.95)))

    lo, hi = FG_FRACTION
    for _ in range(MAX_RETRIES):
        radius = rng.uniform(*cls.size_range)
        rot = rng.uniform(*cls.rotation_range)
        cy, cx = rng.uniform(radius * 0.7, 1 - radius * 0.7, size=2)
        du, dv = (x - cx) / radius, (y - cy) / radius
        c, s = math.cos(rot), math.sin(rot)
        u, v = c * du + s * dv, -s * du + c * dv
        mask = _shape_mask(cls.kind, u, v)
        frac = mask.mean()
        coarse = resize_nearest(mask, (size // min_cells, size // min_cells))
        if lo < frac < hi and coarse.any() and not coarse.all():
            break
    else:
        raise GenerationError(f"could not place a valid {cls.kind} after {MAX_RETRIES} tries")

    stripes = 1.0 + 0.08 * np.sin(2 * math.pi * cls.stripe_freq * u / 2.0)
    fg = fill[:, None, None] * stripes[None]
    img = np.where(mask[None], fg, bg)
    return np.clip(img, 0.0, 1.0), mask[None].astype(np.uint8)


def apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """gain * img**gamma + bias (+ gaussian noise), clamped to [0, 1]."""
    if style.is_identity:
        return img.copy()
    out = np.power(img, style.gamma)
    out = out * np.asarray(style.gain)[:, None, None] + np.asarray(style.bias)[:, None, None]
    if style.noise_std > 0:
        out = out + rng.normal(0.0, style.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(cls: ShapeClass, style: DomainStyle, rng: np.random.Generator,
                  size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    img, mask = render_content(cls, rng, size, style.texture_freq)
    return apply_style(img, style, rng), mask


# -- manifest and on-disk benchmark ---------------------------------------------

@dataclass
class DatasetManifest:
    seed: int = 0
    image_size: int = 64
    train_classes: List[int] = field(default_factory=lambda: list(range(8)))
    test_classes: List[int] = field(default_factory=lambda: list(range(8, 12)))
    source_style: str = "source"
    target_styles: List[str] = field(default_factory=lambda: ["target1", "target2", "target3"])
    styles: Dict[str, DomainStyle] = field(default_factory=default_styles)
    n_train: int = 2000
    episodes_per_style: int = 200
    shots: List[int] = field(default_factory=lambda: [1, 5])
    root: str = "data"

    def validate(self) -> None:
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test classes must be disjoint")
        if self.source_style in self.target_styles:
            raise ValueError("source style must not be a test style")
        for sid in [self.source_style, *self.target_styles]:
            if sid not in self.styles:
                raise ValueError(f"style {sid!r} not defined")
        for c in [*self.train_classes, *self.test_classes]:
            if not 0 <= c < len(CLASS_TABLE):
                raise ValueError(f"unknown class id {c}")
        if self.image_size < 32 or self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8 and >= 32")
        if self.n_train < 1 or self.episodes_per_style < 1 or not self.shots or min(self.shots) < 1:
            raise ValueError("counts and shots must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = {k: asdict(v) for k, v in self.styles.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        if "styles" in d:
            d["styles"] = {k: DomainStyle(**{**v, "gain": tuple(v["gain"]), "bias": tuple(v["bias"])})
                           for k, v in d["styles"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SampleJob:
    split: str
    style_id: str
    class_id: int
    sample_id: str
    seed_key: Tuple[int, ...]


def _style_index(m: DatasetManifest, sid: str) -> int:
    return sorted(m.styles).index(sid)


def plan_jobs(m: DatasetManifest) -> Tuple[List[SampleJob], Dict[str, Dict[str, list]]]:
    """Every sample to render plus the per-style episode index of the test split."""
    jobs: List[SampleJob] = []
    src = _style_index(m, m.source_style)
    for i in range(m.n_train):
        c = m.train_classes[i % len(m.train_classes)]
        jobs.append(SampleJob("train", m.source_style, c, f"{i:05d}", (m.seed, 0, src, 0, i)))
    episodes: Dict[str, Dict[str, list]] = {}
    for sid in m.target_styles:
        si = _style_index(m, sid)
        episodes[sid] = {}
        for K in m.shots:
            rows = []
            for e in range(m.episodes_per_style):
                c = m.test_classes[e % len(m.test_classes)]
                sup = [f"k{K}_e{e:04d}_s{j}" for j in range(K)]
                qry = f"k{K}_e{e:04d}_q"
                for j, name in enumerate(sup):
                    jobs.append(SampleJob("test", sid, c, name, (m.seed, 1, si, K, e, j)))
                jobs.append(SampleJob("test", sid, c, qry, (m.seed, 1, si, K, e, K)))
                rows.append({"episode_id": f"{sid}_k{K}_e{e:04d}", "class_id": c,
                             "supports": sup, "query": qry})
            episodes[sid][str(K)] = rows
    return jobs, episodes


def render_job(m: DatasetManifest, job: SampleJob) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(list(job.seed_key)))
    return render_sample(shape_class(job.class_id), m.styles[job.style_id], rng, m.image_size)


def sample_paths(root: Path, job: SampleJob) -> Tuple[Path, Path]:
    d = root / job.split / job.style_id / str(job.class_id)
    return d / f"{job.sample_id}.ppm", d / f"{job.sample_id}.pgm"


def build_benchmark(m: DatasetManifest, root: Optional[Path] = None, jobs: int = 1) -> str:
    """Render and write the benchmark; returns the content hash of the tree."""
    m.validate()
    root = Path(root if root is not None else m.root)
    job_list, episodes = plan_jobs(m)

    def work(job: SampleJob) -> None:
        img, mask = render_job(m, job)
        ppm, pgm = sample_paths(root, job)
        ppm.parent.mkdir(parents=True, exist_ok=True)
        netpbm.write_ppm(ppm, img)
        netpbm.write_pgm(pgm, mask)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(work, job_list))
    else:
        for job in job_list:
            work(job)
    for sid, rows in episodes.items():
        path = root / "test" / sid / "episodes.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    m.dump(root / "manifest.json")
    return tree_hash(root)


def count_summary(m: DatasetManifest) -> Dict[str, int]:
    job_list, episodes = plan_jobs(m)
    return {
        "train_samples": sum(j.split == "train" for j in job_list),
        "test_samples": sum(j.split == "test" for j in job_list),
        "test_episodes": sum(len(r) for per in episodes.values() for r in per.values()),
        "files": 2 * len(job_list) + len(episodes) + 1,
    }


def tree_hash(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode("utf-8") + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
