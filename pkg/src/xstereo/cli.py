"""Command-line entry point: prepare, synth, train, eval, infer, report."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .dataset import (DatasetError, DatasetManifest, load_dataset, load_folds, load_pair,
                      manifest_summary, split_folds)
from .evaluate import (cross_validate, draw_overlay, evaluate_fold, plot_recall,
                       predict_points, read_report, write_predictions, write_report)
from .extractor import ConfigError
from .synth import SynthError, generate_dataset
from .train import CheckpointError, NumericalError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("xstereo")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML, flat key: value)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="CPU threads; 1 guarantees bit-determinism")
    common.add_argument("--force", action="store_true")
    common.add_argument("--fold", help="fold id (default: every fold)")
    common.add_argument("--fusion-mode", choices=["both", "correlation_only", "concatenation_only"])
    common.add_argument("--variant", choices=["scales", "stages", "x1", "x2", "x3"])
    common.add_argument("--sweep-mode", choices=["windowed", "wide"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="xstereo", description="Visible/thermal patch stereo toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="validate a dataset and write the manifest cache")
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one model per fold")
    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on their test split")
    p.add_argument("--checkpoint", help="checkpoint path (default: <output_dir>/fold_<id>/checkpoint.pt)")
    p.add_argument("--overlays", type=int, default=0, help="number of frames to draw overlays for")
    p = sub.add_parser("infer", parents=[common], help="estimate the disparity of one point")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p = sub.add_parser("report", parents=[common], help="aggregate fold reports")
    p.add_argument("reports", nargs="+", help="report.json files")
    p.add_argument("--out", help="output directory (default: <output_dir>)")
    p.add_argument("--label", default="xstereo")
    return parser


def resolve_config(args):
    overrides = {"seed": args.seed, "workers": args.workers, "fusion_mode": args.fusion_mode,
                 "variant": args.variant, "sweep_mode": args.sweep_mode}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfgmod.load_config(args.config, overrides)


def _folds(cfg, manifest, only=None):
    if cfg.folds_path:
        folds = load_folds(cfg.folds_path)
    else:
        f = cfg.default_fold(manifest.pairs)
        folds = {f.fold_id: f}
    if only is not None:
        if only not in folds:
            raise UsageError(f"fold {only!r} not defined (have {sorted(folds)})")
        folds = {only: folds[only]}
    return folds


def _fold_dir(cfg, fold_id):
    return Path(cfg.output_dir) / f"fold_{fold_id}"


def cmd_prepare(cfg, args):
    manifest = load_dataset(cfg.dataset_root, d_max=cfg.d_max, patch_size=cfg.patch_size)
    folds = {}
    for fid, spec in _folds(cfg, manifest, args.fold).items():
        tr, va, te = split_folds(manifest, spec, augment=cfg.augment, patch_size=cfg.patch_size)
        folds[fid] = {"train_frames": len(tr.pairs), "val_frames": len(va.pairs), "test_frames": len(te.pairs),
                      "train_points": len(tr.points), "val_points": len(va.points),
                      "test_points": len(te.points), "dropped_neighbours": tr.dropped,
                      "stats": tr.stats.__dict__}
    summary = manifest_summary(manifest, {"d_max": cfg.d_max, "patch_size": cfg.patch_size, "folds": folds})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"frames: {summary['frames']}  points: {summary['points']}  rejected: {summary['rejected_points']}")
    for fid, f in folds.items():
        print(f"fold {fid}: train {f['train_frames']} frames / {f['train_points']} points "
              f"(augmented), val {f['val_points']}, test {f['test_points']}")
    return 0


def cmd_synth(cfg, args):
    root = Path(cfg.dataset_root)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise UsageError(f"{root} is not empty; pass --force to overwrite")
        for name in ("rgb", "lwir"):
            shutil.rmtree(root / name, ignore_errors=True)
        (root / "points.csv").unlink(missing_ok=True)
    generate_dataset(cfg.synth_config(), cfg.synth_frames, root)
    print(f"wrote {cfg.synth_frames} synthetic frames to {root}")
    return 0


def cmd_train(cfg, args):
    manifest = load_dataset(cfg.dataset_root, d_max=cfg.d_max, patch_size=cfg.patch_size)
    for fid, spec in _folds(cfg, manifest, args.fold).items():
        tr, va, _ = split_folds(manifest, spec, augment=cfg.augment, patch_size=cfg.patch_size)
        out = _fold_dir(cfg, fid)
        out.mkdir(parents=True, exist_ok=True)
        ckpt, history = train(tr, va, cfg.extractor_config(), cfg.head_config(), cfg.hyperparams(),
                              fold_id=fid, log_path=out / "train_log.jsonl",
                              progress=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
        save_checkpoint(out / "checkpoint.pt", ckpt)
        (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
        print(f"fold {fid}: best epoch {ckpt.epoch}, val recall@3 {ckpt.val_recall[3]:.3f} -> {out / 'checkpoint.pt'}")
    return 0


def cmd_eval(cfg, args):
    manifest = load_dataset(cfg.dataset_root, d_max=cfg.d_max, patch_size=cfg.patch_size)
    reports = []
    for fid, spec in _folds(cfg, manifest, args.fold).items():
        out = _fold_dir(cfg, fid)
        ckpt = load_checkpoint(args.checkpoint or out / "checkpoint.pt")
        if ckpt.fold_id is not None and ckpt.fold_id != fid:
            raise UsageError(f"checkpoint was trained on fold {ckpt.fold_id}, not fold {fid}")
        _, _, te = split_folds(manifest, spec, augment=False, patch_size=cfg.patch_size)
        te.stats = ckpt.stats
        report, estimates = evaluate_fold(ckpt.model, te, cfg.d_max, fid, cfg.sweep_mode)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / "predictions.csv", estimates)
        write_report(out / "report.json", report)
        for frame in sorted(te.pairs)[:args.overlays]:
            draw_overlay(out / f"overlay_{frame}.png", te, estimates, frame)
        reports.append(report)
        print(f"fold {fid}: " + "  ".join(f"recall@{n} {v:.3f}" for n, v in report.recall.items()))
    agg = cross_validate(reports)
    print(agg.table())
    return 0


def cmd_infer(cfg, args):
    ckpt = load_checkpoint(args.checkpoint)
    pair = load_pair(cfg.dataset_root, args.frame)
    if not (0 <= args.x < pair.width and 0 <= args.y < pair.height):
        raise DatasetError(f"point ({args.x}, {args.y}) outside frame {pair.width}x{pair.height}")
    from .dataset import DisparityPoint
    m = DatasetManifest(Path(cfg.dataset_root), {pair.frame_id: pair}, [], stats=ckpt.stats)
    point = DisparityPoint(pair.frame_id, args.x, args.y, 0)
    (est,) = predict_points(ckpt.model, m, [point], ckpt.hyper.d_max, cfg.sweep_mode)
    print(json.dumps({"frame_id": args.frame, "x": args.x, "y": args.y, "d_corr": est.d_corr,
                      "d_concat": est.d_concat, "d_hat": est.d_hat}))
    return 0


def cmd_report(cfg, args):
    reports = []
    for path in args.reports:
        if not Path(path).is_file():
            raise DatasetError(f"missing report {path}")
        reports.extend(read_report(path))
    agg = cross_validate(reports, label=args.label)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "aggregate.json", agg)
    (out / "aggregate.md").write_text(agg.table() + "\n")
    plot_recall(out / "recall.png", agg)
    print(agg.table())
    return 0


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.workers))
        if args.command in ("synth", "train", "eval", "prepare"):
            cfgmod.write_config(Path(cfg.output_dir) / f"resolved_{args.command}.yaml", cfg)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"{_where(exc)}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SynthError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"{_where(exc)}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"{_where(exc)}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _where(exc):
    mod = type(exc).__module__
    return mod if mod.startswith("xstereo") else "xstereo"


if __name__ == "__main__":
    sys.exit(main())
