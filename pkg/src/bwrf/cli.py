"""Command-line entry points.

Subcommands:

    train-fp             train the full-precision counterpart, keep the best
                         checkpoint by test accuracy
    train-bwrf           train a low-precision model against a frozen FP
                         checkpoint with the composite grafted objective
    train-baseline       the same loop with every graft/distill term off,
                         i.e. plain quantization-aware training
    eval                 top-1/top-5 of one branch (Q, F, or M<k>) on the
                         test split
    analyze-similarity   cosine alignment between LP and FP features

Every command takes --config FILE plus repeatable --set key=value
overrides, writes its resolved configuration next to its outputs, and
exits 0 on success, 2 on configuration errors, 3 on data errors, and 4 on
checkpoint errors.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from bwrf.checkpoint import CheckpointError, load_into_model, save_model
from bwrf.config import ConfigError, RunConfig, load_config, resolved_text
from bwrf.data import DataError, load_cifar10, load_idx_dir, subset
from bwrf.graft import LossWeights, graft_forward
from bwrf.network import BlockSpec, build_model, init_lp_from_fp
from bwrf.training import cosine_similarities, evaluate, train_bwrf, train_fp

FP_COLUMNS = ("epoch", "lr", "loss", "train_acc", "test_acc")


def build_spec(cfg: RunConfig) -> BlockSpec:
    return BlockSpec.from_arch(cfg.arch, cfg.in_channels, cfg.num_classes)


def load_splits(cfg: RunConfig):
    loader = load_cifar10 if cfg.data_format == "cifar10" else load_idx_dir
    train, test = loader(cfg.data_dir, cfg.normalize_mean, cfg.normalize_std)
    if cfg.subset_fraction < 1.0:
        train = subset(train, cfg.subset_fraction, cfg.subset_seed)
        test = subset(test, cfg.subset_fraction, cfg.subset_seed)
    return train, test


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(alpha=cfg.alpha, temperature=cfg.temperature,
                       use_mp_targets=cfg.use_mp_targets, use_fp_kd=cfg.use_fp_kd,
                       use_mp_kd=cfg.use_mp_kd, use_avg_labels=cfg.use_avg_labels,
                       mp_branches=cfg.mp_branches)


def bwrf_columns(cfg: RunConfig, n_blocks: int) -> tuple:
    cols = ["epoch", "lr", "loss_total", "loss_target", "loss_distill",
            "train_acc_Q", "acc_Q"]
    cols += [f"acc_M{k}" for k in range(1, n_blocks)]
    cols.append("acc_F")
    if cfg.cos_every:
        cols += [f"cos_b{i}" for i in range(1, n_blocks + 1)]
        cols += [f"cos_g{i}" for i in range(1, n_blocks)]
    return tuple(cols)


def write_csv(path: str, rows: list, columns: tuple):
    def cell(v):
        if v is None:
            return ""
        return repr(v) if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([cell(row.get(c)) for c in columns])


def prepare_output_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(resolved_text(cfg))
    return cfg.output_dir


# -- commands -----------------------------------------------------------------------


def cmd_train_fp(args) -> int:
    cfg = load_config(args.config, args.set)
    train, test = load_splits(cfg)
    out_dir = prepare_output_dir(cfg)
    model = build_model(build_spec(cfg), "fp", seed=cfg.seed)
    ckpt_path = cfg.checkpoint or os.path.join(out_dir, "fp.ckpt")
    best = {"acc": -1.0, "epoch": 0}

    def keep_best(row, m):
        if row["test_acc"] > best["acc"]:
            best.update(acc=row["test_acc"], epoch=row["epoch"])
            save_model(ckpt_path, m, cfg.arch)

    rows = train_fp(model, train, test, cfg, on_epoch=keep_best)
    write_csv(os.path.join(out_dir, "train_log.csv"), rows, FP_COLUMNS)
    print(f"train-fp done: best test_acc {best['acc']:.2f} (epoch {best['epoch']}) "
          f"-> {ckpt_path}")
    return 0


def _train_lp(args, force_baseline: bool) -> int:
    cfg = load_config(args.config, args.set)
    if force_baseline:
        cfg.use_mp_targets = cfg.use_fp_kd = cfg.use_mp_kd = cfg.use_avg_labels = False
    if not cfg.fp_checkpoint:
        raise ConfigError("this command needs fp_checkpoint = <path to a train-fp checkpoint>")
    train, test = load_splits(cfg)
    out_dir = prepare_output_dir(cfg)
    spec = build_spec(cfg)
    fp = build_model(spec, "fp", seed=cfg.seed)
    load_into_model(cfg.fp_checkpoint, fp, cfg.arch)
    fp.freeze()
    lp = build_model(spec, "lp", bits=cfg.bits,
                     grad_scale_enabled=cfg.grad_scale_enabled, seed=cfg.seed)
    init_lp_from_fp(lp, fp)
    rows = train_bwrf(lp, fp, train, test, cfg, loss_weights(cfg))
    write_csv(os.path.join(out_dir, "train_log.csv"), rows,
              bwrf_columns(cfg, lp.n_blocks))
    ckpt_path = cfg.checkpoint or os.path.join(out_dir, "lp.ckpt")
    save_model(ckpt_path, lp, cfg.arch)
    final = rows[-1]
    print(f"done: final acc_Q {final['acc_Q']:.2f} acc_F {final['acc_F']:.2f} "
          f"-> {ckpt_path}")
    return 0


def cmd_train_bwrf(args) -> int:
    return _train_lp(args, force_baseline=False)


def cmd_train_baseline(args) -> int:
    return _train_lp(args, force_baseline=True)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    if not cfg.checkpoint:
        raise ConfigError("eval needs checkpoint = <path>")
    _, test = load_splits(cfg)
    spec = build_spec(cfg)
    branch = cfg.branch
    if branch == "F":
        model = build_model(spec, "fp", seed=cfg.seed)
        load_into_model(cfg.checkpoint, model, cfg.arch)
        model.eval()
        forward = model
    elif branch == "Q":
        model = build_model(spec, "lp", bits=cfg.bits,
                            grad_scale_enabled=cfg.grad_scale_enabled, seed=cfg.seed)
        load_into_model(cfg.checkpoint, model, cfg.arch)
        model.eval()
        forward = model
    else:
        if not cfg.fp_checkpoint:
            raise ConfigError(f"branch {branch} needs fp_checkpoint as well")
        k = int(branch[1:])
        lp = build_model(spec, "lp", bits=cfg.bits,
                         grad_scale_enabled=cfg.grad_scale_enabled, seed=cfg.seed)
        load_into_model(cfg.checkpoint, lp, cfg.arch)
        lp.eval()
        fp = build_model(spec, "fp", seed=cfg.seed)
        load_into_model(cfg.fp_checkpoint, fp, cfg.arch)
        fp.freeze()
        forward = lambda x: graft_forward(lp.forward_collect(x)[0], fp, k)
    top1, top5 = evaluate(forward, test, cfg.eval_batch_size)
    print(f"branch={branch} top1={top1:.4f} top5={top5:.4f} n={len(test)}")
    return 0


def cmd_analyze_similarity(args) -> int:
    cfg = load_config(args.config, args.set)
    if not cfg.checkpoint or not cfg.fp_checkpoint:
        raise ConfigError("analyze-similarity needs both checkpoint and fp_checkpoint")
    _, test = load_splits(cfg)
    out_dir = prepare_output_dir(cfg)
    spec = build_spec(cfg)
    lp = build_model(spec, "lp", bits=cfg.bits,
                     grad_scale_enabled=cfg.grad_scale_enabled, seed=cfg.seed)
    load_into_model(cfg.checkpoint, lp, cfg.arch)
    fp = build_model(spec, "fp", seed=cfg.seed)
    load_into_model(cfg.fp_checkpoint, fp, cfg.arch)
    fp.freeze()
    metrics = cosine_similarities(lp, fp, test, cfg.cos_samples, cfg.eval_batch_size)
    columns = tuple(metrics)
    write_csv(os.path.join(out_dir, "similarity.csv"), [metrics], columns)
    print(" ".join(f"{k}={v:.6f}" for k, v in metrics.items()))
    return 0


# -- argument plumbing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bwrf",
        description="Quantization-aware training with full-precision grafts.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = (
        ("train-fp", cmd_train_fp, "train the full-precision counterpart"),
        ("train-bwrf", cmd_train_bwrf, "grafted low-precision training"),
        ("train-baseline", cmd_train_baseline, "plain QAT baseline"),
        ("eval", cmd_eval, "evaluate one branch on the test split"),
        ("analyze-similarity", cmd_analyze_similarity,
         "feature alignment between LP and FP models"),
    )
    for name, func, help_text in commands:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
        sp.set_defaults(func=func)
    return parser


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4


def main():
    sys.exit(entry())


if __name__ == "__main__":
    main()
