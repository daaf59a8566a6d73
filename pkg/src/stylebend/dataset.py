"""Loading the on-disk benchmark and sampling training episodes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import netpbm
from .model import Episode
from .synth import DatasetManifest


@dataclass
class SamplePool:
    """Images of one style grouped by class: class_id -> list of (image, mask)."""

    style_id: str
    by_class: Dict[int, List[tuple]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_class.values())


def _load_dir(d: Path) -> List[tuple]:
    out = []
    for ppm in sorted(d.glob("*.ppm")):
        out.append((netpbm.read_ppm(ppm), netpbm.read_pgm(ppm.with_suffix(".pgm"))))
    return out


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return DatasetManifest.load(path)


def load_train_pool(root) -> SamplePool:
    root = Path(root)
    m = load_manifest(root)
    by_class = {c: _load_dir(root / "train" / m.source_style / str(c)) for c in m.train_classes}
    pool = SamplePool(m.source_style, {c: v for c, v in by_class.items() if v})
    if not len(pool):
        raise ValueError(f"empty training pool under {root}")
    return pool


def load_test_episodes(root, style_id: str, shots: int) -> List[Episode]:
    root = Path(root)
    index = json.loads((root / "test" / style_id / "episodes.json").read_text(encoding="utf-8"))
    if str(shots) not in index:
        available = sorted(int(k) for k in index)
        raise ValueError(f"{shots}-shot episodes not available for {style_id} (have {available})")
    episodes = []
    for row in index[str(shots)]:
        d = root / "test" / style_id / str(row["class_id"])
        load = lambda name: (netpbm.read_ppm(d / f"{name}.ppm"), netpbm.read_pgm(d / f"{name}.pgm"))
        episodes.append(Episode([load(s) for s in row["supports"]], load(row["query"]),
                                row["class_id"], style_id, row["episode_id"]))
    return episodes


def sample_episodes(pool: SamplePool, n: int, shots: int, rng: np.random.Generator) -> List[Episode]:
    """n random same-class episodes (K supports + 1 query, all distinct) from the pool."""
    classes = sorted(c for c, v in pool.by_class.items() if len(v) > shots)
    if not classes:
        raise ValueError(f"no class has more than {shots} samples")
    out = []
    for _ in range(n):
        c = classes[rng.integers(len(classes))]
        items = pool.by_class[c]
        idx = rng.choice(len(items), size=shots + 1, replace=False)
        out.append(Episode([items[i] for i in idx[:shots]], items[idx[shots]], c, pool.style_id))
    return out


def episode_stream(pool: SamplePool, n_episodes: int, batch: int, shots: int,
                   rng: np.random.Generator) -> Sequence[List[Episode]]:
    left = n_episodes
    while left > 0:
        k = min(batch, left)
        yield sample_episodes(pool, k, shots, rng)
        left -= k
