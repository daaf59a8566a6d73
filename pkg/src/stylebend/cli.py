"""stylebend {generate|train|eval|verify|stats|trend}"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import synth
from .checkpoint import CheckpointError
from .dataset import load_manifest, load_test_episodes, load_train_pool
from .tensor import NonFiniteError
from .train import (EPISODE_FIELDS, LOSS_FIELDS, SUMMARY_FIELDS, TrainConfig, TrainingError,
                    evaluate, finalize_baseline, load_model, save_model, stage_stats_table,
                    summary_rows, train_adapter, train_baseline, write_csv)

log = logging.getLogger("stylebend")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed_override(args) -> Optional[int]:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("STYLEBEND_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"STYLEBEND_SEED must be an integer, got {env!r}")


def _load_config(path: Optional[str], args) -> TrainConfig:
    if path is None:
        cfg = TrainConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = TrainConfig.loads(p.read_text(encoding="utf-8"))
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad config {p}: {e}")
    seed = _seed_override(args)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _config_for_checkpoint(ckpt: Path, explicit: Optional[str], args) -> TrainConfig:
    if explicit is None and (ckpt.parent / "config.json").exists():
        explicit = str(ckpt.parent / "config.json")
    return _load_config(explicit, args)


def _out_dir(args, fallback: str = "runs") -> Path:
    out = Path(args.out if args.out is not None else fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- generate ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    try:
        m = synth.DatasetManifest.load(path)
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"invalid manifest {path}: {e}")
    seed = _seed_override(args)
    if seed is not None:
        m.seed = seed
    if args.dry_run:
        for k, v in synth.count_summary(m).items():
            print(f"{k}\t{v}")
        return EXIT_OK
    root = Path(args.out)
    digest = synth.build_benchmark(m, root, jobs=args.jobs)
    print(f"wrote {root}")
    print(f"sha256 {digest}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config, args)
    if args.no_cyc:
        cfg.use_cyc = False
    if args.no_align:
        cfg.use_align = False
    if args.data:
        cfg.data_dir = args.data
    out = _out_dir(args, cfg.out_dir)
    data = Path(cfg.data_dir)
    if not (data / "manifest.json").exists():
        raise UsageError(f"no dataset at {data} (run `stylebend generate` first)")
    pool = load_train_pool(data)

    key = f"{args.phase}_epochs"
    if args.phase == "baseline":
        if args.checkpoint:
            model, progress = load_model(args.checkpoint, cfg)
        else:
            model, progress = cfg.new_model(), {}
        start = progress.get(key, 0)
        rows = train_baseline(cfg, pool, model, start_epoch=start)
        if start < cfg.epochs_baseline:
            finalize_baseline(cfg, pool, model)
        progress[key] = max(start, cfg.epochs_baseline)
    else:
        if not args.checkpoint:
            raise UsageError("adapter phase needs --checkpoint pointing at a baseline checkpoint")
        model, progress = load_model(args.checkpoint, cfg)
        if not model.bank.mu_datum:
            raise UsageError(f"{args.checkpoint} has no stats bank; train the baseline phase first")
        start = progress.get(key, 0)
        rows = train_adapter(cfg, pool, model, start_epoch=start)
        progress[key] = max(start, cfg.epochs_adapter)

    ckpt = out / f"{args.phase}.ckpt"
    save_model(ckpt, model, progress)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    write_csv(out / f"{args.phase}_losses.csv", LOSS_FIELDS, rows)
    print(f"{args.phase}: {len(rows)} steps -> {ckpt}")
    if rows:
        last = rows[-1]
        print("last step: " + " ".join(f"{k}={float(last[k]):.4f}" for k in LOSS_FIELDS[2:]))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg = _config_for_checkpoint(ckpt, args.config, args)
    model, _ = load_model(ckpt, cfg)
    data = Path(args.data or cfg.data_dir)
    m = load_manifest(data)
    styles = args.styles or list(m.target_styles)
    unknown = [s for s in styles if s not in m.target_styles]
    if unknown:
        raise UsageError(f"no test split for style(s) {unknown}; have {m.target_styles}")
    modes = {"on": [True], "off": [False], "both": [False, True]}[args.rectify]
    out = _out_dir(args)
    results, ep_rows = [], []
    for style in styles:
        try:
            episodes = load_test_episodes(data, style, args.shots)
        except ValueError as e:
            raise UsageError(str(e))
        for rect in modes:
            r = evaluate(model, episodes, rect, dtype=cfg.precision, jobs=args.jobs)
            results.append(r)
            ep_rows.extend({**row, "rectify": str(int(rect))} for row in r.rows)
    write_csv(out / "summary.csv", SUMMARY_FIELDS, summary_rows(results))
    write_csv(out / "episodes.csv", ["rectify"] + EPISODE_FIELDS, ep_rows)
    _print_summary(results)
    return EXIT_OK


def _print_summary(results) -> None:
    by = {}
    for r in results:
        by.setdefault((r.style_id, r.shots), {})[r.rectify] = r.miou
    print(f"{'style':<10} {'shots':>5} {'baseline':>9} {'adapter':>9}")
    fmt = lambda v: f"{100 * v:9.2f}" if v is not None else f"{'-':>9}"
    for (style, shots), d in by.items():
        print(f"{style:<10} {shots:>5} {fmt(d.get(False))} {fmt(d.get(True))}")


# -- verify -------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    seed = _seed_override(args) or 0
    for name in names:
        rep = run_suite(name, seed)
        print("\n".join(rep.lines()))
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_FAIL


# -- stats ------------------------------------------------------------------------------------

def cmd_stats(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg = _config_for_checkpoint(ckpt, args.config, args)
    model, _ = load_model(ckpt, cfg)
    n_stages = len(model.encoder.channels)
    if not 0 <= args.stage < n_stages:
        raise UsageError(f"stage must be in [0, {n_stages - 1}], got {args.stage}")
    data = Path(args.data or cfg.data_dir)
    m = load_manifest(data)
    style = args.style or m.source_style
    if style == m.source_style:
        pool = load_train_pool(data)
        images = [img for c in sorted(pool.by_class) for img, _ in pool.by_class[c]]
    else:
        images = [ep.query[0] for ep in load_test_episodes(data, style, 1)]
    if args.limit:
        images = images[:args.limit]
    if not images:
        raise UsageError(f"no images for style {style}")
    mu, sigma = stage_stats_table(model, np.stack(images), args.stage, dtype=cfg.precision)
    out = _out_dir(args)
    path = out / f"stats_{style}_stage{args.stage}.csv"
    write_csv(path, *stats_rows(mu, sigma))
    print(f"{len(images)} images, {mu.shape[1]} channels -> {path}")
    return EXIT_OK


def stats_rows(mu: np.ndarray, sigma: np.ndarray):
    """Per-image rows then one dataset-average row per statistic: item, stat, c0..c{C-1}."""
    C = mu.shape[1]
    fields = ["item", "stat"] + [f"c{i}" for i in range(C)]
    rows = []
    for stat, arr in (("mu", mu), ("sigma", sigma)):
        for i, v in enumerate(arr):
            rows.append({"item": str(i), "stat": stat, **{f"c{j}": repr(float(x)) for j, x in enumerate(v)}})
        avg = arr.mean(axis=0)
        rows.append({"item": "mean", "stat": stat, **{f"c{j}": repr(float(x)) for j, x in enumerate(avg)}})
    return fields, rows


# -- trend ---------------------------------------------------------------------------------

def cmd_trend(args) -> int:
    from .experiment import TrendConfig, run_trend

    data = Path(args.data)
    if not (data / "manifest.json").exists():
        raise UsageError(f"no dataset at {data}")
    cfg = TrendConfig()
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    if args.baseline_steps is not None:
        cfg.baseline_steps = args.baseline_steps
    if args.adapter_steps is not None:
        cfg.adapter_steps = args.adapter_steps
    rep = run_trend(data, cfg, out=_out_dir(args))
    print(f"baseline mean target mIoU   {100 * rep.mean_baseline():.2f}")
    for name in cfg.configs:
        print(f"rectified ({name:<5}) mIoU     {100 * rep.mean_rectified(name):.2f}")
    print(f"closer to bank (both)       {100 * rep.closer_fraction():.1f}%")
    return EXIT_OK


# -- entry ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylebend", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--seed", type=int, default=None, help="overrides config and STYLEBEND_SEED")
        sp.add_argument("--out", default=out_default,
                        help=f"artifact directory (default: {out_default or 'config out_dir'})")

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("manifest")
    common(g, "data")
    g.add_argument("--dry-run", action="store_true", help="print counts only")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="baseline or adapter phase")
    t.add_argument("config", nargs="?", default=None, help="TrainConfig JSON")
    t.add_argument("--phase", choices=["baseline", "adapter"], required=True)
    t.add_argument("--checkpoint", help="resume (baseline) or start from (adapter)")
    t.add_argument("--data", help="dataset root; overrides the config")
    t.add_argument("--no-cyc", action="store_true")
    t.add_argument("--no-align", action="store_true")
    common(t, None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-style mIoU on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--shots", type=int, default=1)
    e.add_argument("--rectify", choices=["on", "off", "both"], default="both")
    e.add_argument("--styles", nargs="*")
    e.add_argument("--jobs", type=int, default=1)
    common(e)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="64-bit property suites")
    v.add_argument("suite", choices=["all", "gradcheck", "algebra", "stats-oracle", "cyclic", "bank"])
    v.add_argument("--seed", type=int, default=None)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("stats", help="dump per-channel statistics at one stage")
    s.add_argument("checkpoint")
    s.add_argument("--stage", type=int, required=True)
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--style")
    s.add_argument("--limit", type=int, default=0)
    common(s)
    s.set_defaults(func=cmd_stats)

    r = sub.add_parser("trend", help="multi-seed baseline vs rectified trend run")
    r.add_argument("--data", default="data")
    r.add_argument("--seeds", type=int, nargs="*")
    r.add_argument("--baseline-steps", type=int)
    r.add_argument("--adapter-steps", type=int)
    common(r)
    r.set_defaults(func=cmd_trend)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"stylebend: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingError, NonFiniteError, FileNotFoundError) as e:
        print(f"stylebend: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
