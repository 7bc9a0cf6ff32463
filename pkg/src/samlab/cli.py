"""Command-line entry point.

Subcommands: toy, train, eval, diagnose, bench. Exit codes: 0 success,
1 usage or configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, DataError, NumericError, SamlabError, ShapeError
from .harness import TrainConfig, run_toy_experiment, train, write_report
from .model import AttentionVariant


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV path or 'toy'")
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--lookback", type=int, default=512)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--optimizer", choices=("adam", "adamw", "sgd"), default="adam")
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--no-sam", action="store_true")
    p.add_argument("--no-revin", action="store_true")
    p.add_argument("--sigma-reparam", action="store_true")
    p.add_argument("--attention", choices=("channel", "identity", "temporal"),
                   default="channel")
    p.add_argument("--random-transformer", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--toy-scale", choices=("desk", "paper"), default="desk",
                   help="toy data sizes when --data toy")
    p.add_argument("--out", default=None, help="directory for report + checkpoint")


def _config_from_args(args) -> TrainConfig:
    config = TrainConfig(
        dataset=args.data, lookback=args.lookback, horizon=args.horizon,
        d_model=args.d_model, batch_size=args.batch_size, epochs=args.epochs,
        patience=args.patience, lr=args.lr, rho=args.rho, optimizer=args.optimizer,
        seed=args.seed, attention=AttentionVariant(args.attention),
        revin=not args.no_revin, sigma_reparam=args.sigma_reparam,
        sam=not args.no_sam, random_transformer=args.random_transformer,
        weight_decay=args.weight_decay)
    if args.data == "toy" and args.toy_scale == "desk":
        config = replace(config, toy_n_train=2000, toy_n_val=1000)
    return config


def _write_outputs(out_dir: str, tag: str, outcome) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, f"{tag}.report"), outcome.report)
    write_checkpoint(os.path.join(out_dir, f"{tag}.ckpt"), outcome.params,
                     outcome.dims, outcome.options)


def cmd_toy(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(arm, seed, outcome):
        print(f"arm={arm} seed={seed} final_val={outcome.report.epoch_val[-1]:.6g} "
              f"stop_epoch={outcome.report.stop_epoch}", flush=True)

    result = run_toy_experiment(seeds, scale=args.scale, progress=progress)
    print(f"oracle_val_mse {result.oracle_val_mse:.6g}")
    for arm in harness.TOY_ARMS:
        med = result.median_final_val(arm)
        gap = med / result.oracle_val_mse - 1.0
        print(f"{arm}: median_final_val={med:.6g} (oracle gap {100*gap:+.2f}%)")
    if args.diagnostics:
        for arm in harness.TOY_ARMS:
            for seed, outcome in zip(seeds, result.outcomes[arm]):
                sharp, stats = harness.diagnose(
                    outcome.final_params, outcome.dims, outcome.options,
                    outcome.bundle)
                outcome.report.lambda_max = sharp.lambda_max
                outcome.report.lambda_max_converged = sharp.converged
                outcome.report.mean_attention_entropy = stats.mean_entropy
                outcome.report.median_attention_nuclear_norm = float(
                    np.median(stats.nuclear_norms))
                print(f"{arm} seed={seed}: lambda_max={sharp.lambda_max:.6g} "
                      f"entropy={stats.mean_entropy:.4f} "
                      f"nuclear_median={outcome.report.median_attention_nuclear_norm:.4f}",
                      flush=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for arm in harness.TOY_ARMS:
            for seed, outcome in zip(seeds, result.outcomes[arm]):
                _write_outputs(args.out, f"toy_{args.scale}_{arm}_seed{seed}", outcome)
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    outcome = train(config)
    r = outcome.report
    print(f"stop_epoch {r.stop_epoch} best_epoch {r.best_epoch} "
          f"best_val_mse {r.best_val_mse:.6g}")
    print(f"test_mse {r.test_mse:.6g} test_mae {r.test_mae:.6g} "
          f"wall_time_s {r.wall_time_s:.1f}")
    if args.out:
        tag = f"{harness.dataset_key(config.dataset)}_H{config.horizon}_seed{config.seed}"
        _write_outputs(args.out, tag, outcome)
    return 0


def _bundle_for_checkpoint(args, dims, options):
    config = TrainConfig(dataset=args.data, lookback=dims.lookback,
                         horizon=dims.horizon)
    if args.data == "toy" and getattr(args, "toy_scale", "desk") == "desk":
        config = replace(config, toy_n_train=2000, toy_n_val=1000)
    bundle = harness.load_bundle(config)
    if bundle.channels != dims.channels:
        raise ConfigError(f"checkpoint has D={dims.channels} channels but the "
                          f"dataset provides {bundle.channels}")
    return bundle


def cmd_eval(args) -> int:
    params, dims, options = read_checkpoint(args.ckpt)
    bundle = _bundle_for_checkpoint(args, dims, options)
    ds = {"train": bundle.train, "val": bundle.val, "test": bundle.test}[args.split]
    mse, mae = harness.evaluate_params(params, ds, dims, options)
    print(f"split {args.split} mse {mse:.6g} mae {mae:.6g}")
    return 0


def cmd_diagnose(args) -> int:
    params, dims, options = read_checkpoint(args.ckpt)
    bundle = _bundle_for_checkpoint(args, dims, options)
    want_both = not args.sharpness and not args.attention_stats
    sharp, stats = harness.diagnose(
        params, dims, options, bundle,
        sharpness=args.sharpness or want_both,
        attention_stats=args.attention_stats or want_both or bool(args.dump_attention),
        dump_attention=args.dump_attention)
    if sharp is not None:
        print(f"lambda_max {sharp.lambda_max:.6g} iterations {sharp.iterations_used} "
              f"converged {int(sharp.converged)}")
    if stats is not None:
        print(f"mean_attention_entropy {stats.mean_entropy:.6g}")
        print(f"median_attention_nuclear_norm {np.median(stats.nuclear_norms):.6g}")
    return 0


def cmd_bench(args) -> int:
    horizons = [int(h) for h in args.horizons.split(",")]
    seeds = list(range(args.seeds))
    os.makedirs(args.out, exist_ok=True)
    for horizon in horizons:
        cell = []
        for seed in seeds:
            config = TrainConfig(dataset=args.data, horizon=horizon,
                                 lookback=args.lookback, seed=seed)
            outcome = train(config)
            cell.append(outcome.report.test_mse)
            tag = f"{harness.dataset_key(args.data)}_H{horizon}_seed{seed}"
            _write_outputs(args.out, tag, outcome)
            print(f"H={horizon} seed={seed} test_mse={outcome.report.test_mse:.6g} "
                  f"test_mae={outcome.report.test_mae:.6g}", flush=True)
        print(f"H={horizon}: mean_mse={np.mean(cell):.6g} std={np.std(cell):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_toy = sub.add_parser("toy", help="four-arm toy comparison plus oracle")
    p_toy.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p_toy.add_argument("--seeds", default="0,1,2")
    p_toy.add_argument("--out", default=None)
    p_toy.add_argument("--diagnostics", action="store_true")
    p_toy.set_defaults(fn=cmd_toy)

    p_train = sub.add_parser("train", help="one training run")
    _add_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.set_defaults(fn=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="sharpness and attention statistics")
    p_diag.add_argument("--ckpt", required=True)
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--sharpness", action="store_true")
    p_diag.add_argument("--attention-stats", action="store_true")
    p_diag.add_argument("--dump-attention", default=None, metavar="FILE")
    p_diag.set_defaults(fn=cmd_diagnose)

    p_bench = sub.add_parser("bench", help="horizon x seed benchmark grid")
    p_bench.add_argument("--data", required=True)
    p_bench.add_argument("--horizons", default="96,192,336,720")
    p_bench.add_argument("--seeds", type=int, default=5)
    p_bench.add_argument("--lookback", type=int, default=512)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except SamlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
