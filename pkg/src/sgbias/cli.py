"""Command-line front door: generate, train, eval, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence. Every command that owns an output directory writes a resolved
configuration snapshot there, so (snapshot, seed) reproduces the run. The
implementation is single-threaded; SGBIAS_THREADS, when set, is validated
as a positive cap on worker threads and the single worker stays under it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import corpus, metrics, pipeline
from .errors import ConfigError, DataError, DivergenceError, GenerationError
from .params import ParamStore

SPLITS = ("train", "val", "test")


def _check_thread_cap():
    raw = os.environ.get("SGBIAS_THREADS")
    if raw is None:
        return
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"SGBIAS_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"SGBIAS_THREADS must be >= 1, got {cap}")


def _resolved(args) -> dict:
    return cfgmod.resolve(args.config, args.set or (), args.seed)


def _write_snapshot(cfg: dict, out: Path):
    (out / "config.resolved.txt").write_text(cfgmod.snapshot(cfg))


def _prepare_out(args, force: bool = False) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(data_dir: Path, split: str):
    return corpus.load_dataset(data_dir / f"{split}.jsonl")


def _load_stats(data_dir: Path) -> corpus.StatsTables:
    return corpus.StatsTables.load(data_dir / "stats.ckpt.json")


def cmd_generate(args) -> int:
    cfg = _resolved(args)
    out = _prepare_out(args, force=args.force)
    gen = cfgmod.generator_config(cfg)
    splits = corpus.generate_splits(gen)
    dims = dict(n_objects=gen.n_objects, n_predicates=gen.n_predicates,
                node_dim=gen.node_dim, edge_channels=gen.edge_channels,
                edge_size=gen.edge_size)
    for name, scenes in zip(SPLITS, (splits.train, splits.val, splits.test)):
        corpus.save_dataset(scenes, out / f"{name}.jsonl", **dims)
    # statistics come from the training split only: no leakage into targets
    stats = corpus.compute_marginals(splits.train, gen.n_objects, gen.n_predicates)
    stats.save(out / "stats.ckpt.json")
    corpus.save_manifest(splits.held_out, out / "zero_shot.json")
    _write_snapshot(cfg, out)
    n = (len(splits.train), len(splits.val), len(splits.test))
    print(f"generate: wrote {n[0]}/{n[1]}/{n[2]} train/val/test scenes to {out}")
    return 0


def _build_context(cfg: dict, data_dir: Path, store=None):
    scenes, header = _load_split(data_dir, "train")
    model_cfg = cfgmod.model_config(cfg, header)
    pipe_cfg = cfgmod.pipeline_config(cfg)
    stats = _load_stats(data_dir)
    if store is None:
        store = pipeline.init_model(model_cfg, pipe_cfg.seed)
    ctx = pipeline.RunContext(store, model_cfg, pipe_cfg, stats)
    return scenes, header, ctx


def cmd_train(args) -> int:
    cfg = _resolved(args)
    data_dir = Path(args.data)
    out = _prepare_out(args, force=args.force)
    train_scenes, _, ctx = _build_context(cfg, data_dir)
    val_path = data_dir / "val.jsonl"
    val_scenes = corpus.load_dataset(val_path)[0] if val_path.exists() else []
    history = pipeline.train(train_scenes, val_scenes, ctx)
    ctx.store.save(out / "model.ckpt.json")
    log_lines = [json.dumps(rec, sort_keys=True) for rec in history]
    (out / "train_log.jsonl").write_text(
        "\n".join(log_lines) + ("\n" if log_lines else ""))
    _write_snapshot(cfg, out)
    last = history[-1] if history else {"train_loss": None}
    print(f"train: {len(history)} epochs, final {last}, checkpoint in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    data_dir = Path(args.data)
    if args.split not in SPLITS:
        raise ConfigError(f"--split must be one of {SPLITS}, got {args.split!r}")
    out = _prepare_out(args, force=args.force)
    store = ParamStore.load(args.ckpt)
    scenes, header = _load_split(data_dir, args.split)
    model_cfg = cfgmod.model_config(cfg, header)
    pipe_cfg = cfgmod.pipeline_config(cfg)
    stats = _load_stats(data_dir)
    ctx = pipeline.RunContext(store, model_cfg, pipe_cfg, stats)
    ks = cfgmod.eval_ks(cfg)
    try:
        scores = pipeline.score_all(scenes, ctx)
    except (KeyError, ad.ShapeError) as exc:
        raise DataError(f"checkpoint does not fit this configuration: {exc}") from None
    rep = metrics.report(scores, scenes, model_cfg.n_predicates, ks,
                         stats.train_combos())
    rep.save(out / "report.json")
    ranked = [metrics.rank_unconstrained(s) for s in scores]
    metrics.save_predictions(ranked, out / "predictions.jsonl")
    _write_snapshot(cfg, out)
    for k in ks:
        zs = rep.zero_shot[k]
        zs_text = "n/a" if zs is None else f"{zs:.4f}"
        print(f"eval[{args.split}] K={k}: mR={rep.constrained[k]:.4f} "
              f"ng-mR={rep.unconstrained[k]:.4f} zR={zs_text}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolved(args)
    data_dir = Path(args.data)
    out = _prepare_out(args, force=args.force)
    train_scenes, header, _ = _build_context(cfg, data_dir)
    test_scenes, _ = _load_split(data_dir, "test")
    model_cfg = cfgmod.model_config(cfg, header)
    pipe_cfg = cfgmod.pipeline_config(cfg)
    stats = _load_stats(data_dir)
    grid = cfgmod.ablation_grid(cfg) if args.grid is None else \
        tuple(part.strip() for part in args.grid.split(",") if part.strip())
    seeds = cfgmod.ablation_seeds(cfg)
    ks = tuple(k for k in cfgmod.eval_ks(cfg) if k >= 20) or (20, 50, 100)
    rows = pipeline.ablate(train_scenes, None, test_scenes, model_cfg, pipe_cfg,
                           stats, grid=grid, seeds=seeds, ks=ks,
                           train_combos=stats.train_combos())
    doc = {"schema": "sgbias.ablation.v1", "ks": list(ks), "rows": rows}
    (out / "ablation.json").write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    _write_snapshot(cfg, out)
    header_cells = ["model"] + [f"mR@{k}" for k in ks]
    print("  ".join(f"{c:>16s}" for c in header_cells))
    for row in rows:
        cells = [row["label"]] + [f"{row['median'][k]:.4f}" for k in ks]
        print("  ".join(f"{c:>16s}" for c in cells))
    return 0


def cmd_report(args) -> int:
    rep = metrics.MetricsReport.load(args.report)
    lines = ["evaluation summary", "==================",
             f"scenes: {rep.counts['scenes']}  "
             f"gt triplets: {rep.counts['gt_triplets']}  "
             f"zero-shot gt: {rep.counts['zero_shot_gt']}"]
    lines.append("")
    lines.append(f"{'K':>6s} {'mR':>9s} {'ng-mR':>9s} {'zR':>9s}")
    for k in rep.ks:
        zs = rep.zero_shot[k]
        zs_text = "n/a" if zs is None else f"{zs:9.4f}"
        lines.append(f"{k:>6d} {rep.constrained[k]:9.4f} "
                     f"{rep.unconstrained[k]:9.4f} {zs_text:>9s}")
    lines.append("")
    max_k = max(rep.ks)
    lines.append(f"per-predicate recall at K={max_k} (constrained)")
    for p, value in sorted(rep.per_predicate.items()):
        bar = "#" * int(round(40 * value))
        lines.append(f"  predicate {p:>3d}  {value:7.4f}  {bar}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgbias",
        description="synthetic scene-graph bias framework: data, training, "
                    "evaluation, ablations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override the seed key")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="allow writing into a non-empty directory")

    p = sub.add_parser("generate", help="synthesize dataset splits and statistics")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="directory written by generate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; never mutates it")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="model checkpoint file")
    p.add_argument("--split", default="test", help="train, val, or test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a toggle grid on fixed data")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default=None,
                   help="comma-separated rows, e.g. baseline,eem,eem+lmm")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="pretty-print a report.json")
    p.add_argument("--report", required=True, help="path to report.json")
    p.add_argument("--out", default=None, help="also write report.txt here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
