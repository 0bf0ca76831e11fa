"""``sparsenet`` command line: train, pipeline, prune, eval, analyze, ratio, scratch-control."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .analysis import (
    complementarity,
    compression_ratio,
    magnitude_rank_histogram,
    realized_compression,
    selected_corr_mean,
    write_complementarity,
    write_corr_tracking,
    write_histograms,
)
from .benchmarks import load_dataset, scratch_vs_warm, write_scratch_csv
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import load_idx_dataset
from .layers import evaluate
from .masks import apply_masks
from .pipeline import Stage, build_mask, parse_fraction, run_pipeline, stages_csv, train_baseline
from .pruners import write_reports
from .stats import collect_input_pairs, correlation_table

log = logging.getLogger("sparsenet")

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("SPARSENET_LOG", "error").strip().lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _out_dir(args, cfg) -> Path:
    return Path(args.out if getattr(args, "out", None) else cfg.output_dir)


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "plan", None) is not None:  # an explicit "" means no stages
        cfg = cfg.with_plan(args.plan)
    return cfg


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = load_dataset(cfg.data, cfg.seed)
    net, record = train_baseline(cfg.spec, data, cfg.train)
    record.checkpoint = str(out / "N0.spcn")
    save_checkpoint(net, {}, record.checkpoint)
    atomic_write_text(out / "stages.csv", stages_csv([record]))
    print(f"train_acc {record.train_acc:.4f} eval_acc {record.eval_acc:.4f} -> {record.checkpoint}")


def cmd_pipeline(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = load_dataset(cfg.data, cfg.seed)
    res = run_pipeline(cfg.spec, cfg.plan, data, cfg.train, out_dir=out,
                       policy_overrides=cfg.prune.policy_overrides())
    write_reports(out / "prune_reports.csv", res.reports)
    rows = []
    for rec in res.records[1:]:
        if rec.corr_before is not None:
            rows += [(rec.layer, rec.stage, "before", rec.corr_before), (rec.layer, rec.stage, "after", rec.corr_after)]
    write_corr_tracking(out / "corr_tracking.csv", rows)
    for rec in res.records:
        print(f"N{rec.stage} {rec.layer or '-'} eval_acc {rec.eval_acc:.4f} ratio {rec.compression_ratio:.4f}")


def cmd_prune(args):
    cfg = _config(args)
    net, masks = load_checkpoint(args.checkpoint, cfg.spec)
    data = load_dataset(cfg.data, cfg.seed)
    stage = Stage(args.layer, parse_fraction(args.sparsity), args.criterion or cfg.prune.criterion,
                  args.lam if args.lam is not None else cfg.prune.lam)
    mask, report, _ = build_mask(net, stage, data, cfg.train, masks, net.stage + 1,
                                 cfg.prune.policy_overrides())
    masks = {**masks, args.layer: mask}
    pruned = net.copy()
    apply_masks(pruned, masks)
    save_checkpoint(pruned, masks, args.out)
    if args.report:
        write_reports(args.report, [report])
    print(f"{args.layer}: kept {report.kept_total}/{report.total} (realized {report.realized_sparsity:.6f}) -> {args.out}")


def cmd_eval(args):
    cfg = _config(args)
    net, _ = load_checkpoint(args.checkpoint, cfg.spec)
    if args.data:
        if not args.labels:
            raise ConfigError("--data needs --labels")
        X, y = load_idx_dataset(args.data, args.labels)
    else:
        data = load_dataset(cfg.data, cfg.seed)
        X, y = data.X_test, data.y_test
    loss, acc = evaluate(net, X, y)
    print(f"accuracy {acc:.6f} loss {loss:.6f} n {len(y)}")


def cmd_analyze(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    net, masks = load_checkpoint(args.checkpoint, cfg.spec)
    if args.layer not in masks:
        raise ConfigError(f"checkpoint has no mask for layer {args.layer!r}")
    mask = masks[args.layer]
    data = load_dataset(cfg.data, cfg.seed)
    realized_compression(cfg.spec, masks).to_csv(out / "compression.csv")
    rows = []
    if args.before:
        prev, _ = load_checkpoint(args.before, cfg.spec)
        rows.append((args.layer, net.stage, "before",
                     selected_corr_mean(mask, correlation_table(prev, data.X_stats, args.layer), cfg.spec)))
    rows.append((args.layer, net.stage, "after",
                 selected_corr_mean(mask, correlation_table(net, data.X_stats, args.layer), cfg.spec)))
    write_corr_tracking(out / "corr_tracking.csv", rows)
    source = prev if args.before else net
    pairs = collect_input_pairs(source, data.X_stats, args.layer)
    label = args.criterion or cfg.prune.criterion
    write_complementarity(out / "complementarity.csv",
                          [(label, cfg.seed, complementarity(mask, pairs, cfg.spec))])
    hists = magnitude_rank_histogram(mask, source.params[args.layer]["W"], bins=args.bins)
    write_histograms(out / "histogram.csv", hists)
    for h in hists:
        if h.counts.sum():
            stat, p = h.chi_square()
            print(f"{h.sign}: chi2 {stat:.3f} p {p:.4f}")
    print(f"wrote compression.csv corr_tracking.csv complementarity.csv histogram.csv to {out}")


def cmd_ratio(args):
    cfg = _config(args)
    summary = compression_ratio(cfg.spec, cfg.plan)
    if args.verbose:
        for c in summary.layers:
            print(f"{c.name}\t{c.total}\t{c.kept}")
    print(f"{summary.ratio:.2f}")


def cmd_scratch_control(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    pairs = scratch_vs_warm(cfg, seeds)
    out.mkdir(parents=True, exist_ok=True)
    write_scratch_csv(out / "scratch_control.csv", pairs)
    for p in pairs:
        print(f"seed {p.seed}: warm {p.warm_train_error:.4f} scratch {p.scratch_train_error:.4f}")
    wins = sum(p.warm_wins for p in pairs)
    print(f"warm start has lower train error in {wins}/{len(pairs)} seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsenet", description="Correlation-guided connection pruning.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, plan=True, out=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        if plan:
            p.add_argument("--plan", help='override the stage list, e.g. "f:1/256,5b:1/128"')
        if out:
            p.add_argument("--out", help="output directory (default: the config's output_dir)")
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "train the dense baseline N0", plan=False)
    add("pipeline", cmd_pipeline, "baseline plus every planned stage")
    p = add("prune", cmd_prune, "one-shot mask for one layer of a checkpoint", plan=False, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--sparsity", required=True, help="fraction kept, e.g. 1/128")
    p.add_argument("--criterion")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", required=True, help="path of the pruned checkpoint")
    p.add_argument("--report", help="CSV path for the prune report")
    p = add("eval", cmd_eval, "accuracy of a checkpoint", plan=False, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="IDX image file (default: the config's test split)")
    p.add_argument("--labels", help="IDX label file")
    p = add("analyze", cmd_analyze, "compression, correlation tracking, complementarity, rank histogram",
            plan=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint holding the mask")
    p.add_argument("--before", help="checkpoint the mask was computed from")
    p.add_argument("--layer", required=True)
    p.add_argument("--criterion", help="label for the complementarity row")
    p.add_argument("--bins", type=int, default=20)
    p = add("ratio", cmd_ratio, "compression ratio of a plan, no training", out=False)
    p.add_argument("--verbose", action="store_true")
    p = add("scratch-control", cmd_scratch_control, "warm-started pipeline vs from-scratch control")
    p.add_argument("--seeds", type=int, default=10, help="number of paired seeds")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sparsenet: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
