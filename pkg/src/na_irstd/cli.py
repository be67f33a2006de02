"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path


from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, cache_dir, config_digest, dump_config, load_config
from .data import DataError, IRDataset
from .evaluate import (
    compute_scores,
    coverage_sweep,
    evaluate_model,
    predict_probs,
    write_coverage_csv,
    write_predictions,
)
from .metrics import write_report_csv
from .training import model_from_checkpoint, set_deterministic, stage1_train, stage2_train

logger = logging.getLogger("na_irstd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.synth.seed = args.seed
    if getattr(args, "k", None) is not None:
        cfg.train.k = args.k
    if getattr(args, "threshold", None) is not None:
        cfg.hard.threshold = args.threshold
    return cfg.validate()


def _out(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_dataset(cfg: RunConfig, data_dir: str | None) -> IRDataset:
    """Load ``data_dir`` or, without one, the cached synthetic set for ``cfg.synth``."""
    data_dir = data_dir or cfg.data_dir
    if data_dir:
        if not Path(data_dir).is_dir():
            raise DataError(f"dataset directory {data_dir} does not exist")
        return data_mod.load_dataset(data_dir)
    root = cache_dir() / f"synth-{config_digest(cfg.synth)}"
    if not (root / "splits").is_dir():
        logger.info("generating synthetic dataset into %s", root)
        data_mod.write_dataset(data_mod.synth_generate(cfg.synth), root)
    return data_mod.load_dataset(root)


def _split(ds: IRDataset, name: str) -> IRDataset:
    return ds.split(name) if name in ds.splits else ds


def cmd_dump_config(args):
    print(dump_config(_config(args)), end="")


def cmd_synth(args):
    cfg = _config(args)
    out = _out(args, cfg)
    ds = data_mod.synth_generate(cfg.synth)
    data_mod.write_dataset(ds, out)
    print(f"wrote {len(ds)} images to {out}")


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, cfg)
    ds = resolve_dataset(cfg, args.data)
    train, val = _split(ds, "train"), ds.split("val") if "val" in ds.splits else None
    if args.stage == 1:
        res = stage1_train(train, cfg.model, cfg.train, val=val, log_path=out / "train_log_stage1.csv")
    else:
        if not args.from_checkpoint:
            raise CheckpointError("stage 2 needs --from-checkpoint pointing at a stage-1 checkpoint")
        stage1 = load_checkpoint(args.from_checkpoint)
        res = stage2_train(train, stage1, cfg.model, cfg.train, val=val, log_path=out / "train_log_stage2.csv")
    path = out / f"stage{args.stage}.ckpt"
    save_checkpoint(path, res.checkpoint)
    print(f"saved {path}")


def _load_model(args):
    if not args.checkpoint:
        raise CheckpointError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt, model_from_checkpoint(ckpt)


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args, cfg)
    ckpt, model = _load_model(args)
    if ckpt.stage != 2:
        raise CheckpointError("evaluation needs a stage-2 checkpoint")
    ds = _split(resolve_dataset(cfg, args.data), args.split)
    probs = predict_probs(model, ds, cfg.eval.batch_size)
    acc = evaluate_model(model, ds, probs=probs, threshold=cfg.eval.threshold)
    write_report_csv(out / "report.csv", acc)
    write_predictions(out, ds, probs)
    rep = acc.report()
    print(f"IoU {rep.iou:.4f}  Pd {rep.pd:.4f}  Fa {rep.fa_e6:.2f}e-6  ({rep.num_images} images)")


def cmd_coverage(args):
    cfg = _config(args)
    out = _out(args, cfg)
    ckpt, model = _load_model(args)
    ds = _split(resolve_dataset(cfg, args.data), args.split)
    ks = [int(k) for k in args.k_sweep.split(",")] if args.k_sweep else cfg.eval.k_sweep
    scores = compute_scores(model, ds, cfg.eval.batch_size)
    lattice = model.lattice
    rows = coverage_sweep(scores, ds, lattice, ks)
    supervision = ckpt.config.get("train", {}).get("label_mode", "")
    write_coverage_csv(out / "coverage.csv", rows, dataset=args.data or "synthetic", supervision=supervision)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "j", "u", "v", "score"])
        for s, row in zip(ds, scores):
            for j, val in enumerate(row):
                w.writerow([s.name, j, j // lattice.grid_w, j % lattice.grid_w, f"{val:.6f}"])
    for r in rows:
        print(f"K={r['k']:3d}  coverage {r['coverage']:.4f}")


def cmd_build_hard(args):
    cfg = _config(args)
    out = _out(args, cfg)
    sources = {}
    for item in args.sources:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        sources[name] = data_mod.load_dataset(path)
    spec = data_mod.HardBenchSpec(cfg.hard.threshold, (cfg.hard.resize_to, cfg.hard.resize_to))
    bench = data_mod.build_hard_benchmark(sources, spec)
    data_mod.write_dataset(bench.dataset, out)
    data_mod.write_manifest(out / "manifest.csv", bench.manifest)
    if len(bench.dataset):
        data_mod.write_cdf(out / "size_cdf.csv", data_mod.size_statistics(bench.dataset), "hard")
    counts = ", ".join(f"{k}={v}" for k, v in bench.source_counts.items())
    print(f"admitted {bench.total} images ({counts})")


def run_downsample_ablation(cfg: RunConfig, ds: IRDataset, out: Path) -> list[dict]:
    """Train the full two-stage pipeline on native and degraded inputs with shared seeds."""
    rows = []
    for label, factor in (("native", 1), (f"{cfg.ablation.factor}x_downsampling", cfg.ablation.factor)):
        arm = ds if factor == 1 else data_mod.downsample_ablation_prep(ds, factor)
        train, test = _split(arm, "train"), arm.split("test")
        s1 = stage1_train(train, cfg.model, cfg.train, log_path=out / f"log_{label}_stage1.csv")
        s2 = stage2_train(train, s1.checkpoint, cfg.model, cfg.train, log_path=out / f"log_{label}_stage2.csv")
        rep = evaluate_model(s2.model, test, cfg.eval.batch_size).report()
        rows.append({"config": label, "iou": rep.iou, "pd": rep.pd, "fa_e6": rep.fa_e6})
    with open(out / "ablation_downsample.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["config", "iou", "pd", "fa_e6"])
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_ablate_downsample(args):
    cfg = _config(args)
    out = _out(args, cfg)
    rows = run_downsample_ablation(cfg, resolve_dataset(cfg, args.data), out)
    for r in rows:
        print(f"{r['config']:>18}: IoU {r['iou']:.4f}  Pd {r['pd']:.4f}  Fa {r['fa_e6']:.2f}e-6")


def cmd_plot(args):
    from .plots import plot_csv

    try:
        path = plot_csv(args.csv, args.kind, args.out, name=args.name)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", default="default", choices=["default", "desk"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="na-irstd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("dump-config", parents=[common]).set_defaults(func=cmd_dump_config)
    sub.add_parser("synth", parents=[common]).set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common])
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--from-checkpoint")
    t.add_argument("--data")
    t.add_argument("--k", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("coverage", parents=[common])
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data")
    c.add_argument("--split", default="test")
    c.add_argument("--k-sweep", help="comma-separated K values")
    c.set_defaults(func=cmd_coverage)

    h = sub.add_parser("build-hard", parents=[common])
    h.add_argument("--sources", nargs="+", required=True, help="NAME=DIR entries")
    h.add_argument("--threshold", type=int)
    h.set_defaults(func=cmd_build_hard)

    a = sub.add_parser("ablate-downsample", parents=[common])
    a.add_argument("--data")
    a.set_defaults(func=cmd_ablate_downsample)

    pl = sub.add_parser("plot", parents=[common])
    pl.add_argument("--csv", required=True)
    pl.add_argument("--kind", required=True, choices=["coverage", "cdf", "scores"])
    pl.add_argument("--name", help="image name for score heatmaps")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        set_deterministic(True)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
