"""Command-line entry point: ``dtjscc <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors (bad flags, unreadable or
invalid config) and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import harness
from .engine import (TrainConfig, encoder_distributions, evaluate, load_checkpoint, load_datasets,
                     save_checkpoint, train)
from .errors import ConfigError, DtJsccError
from .modem import psnr_to_sigma2, transition_matrix
from .objective import estimate_i_z_zhat


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_config(path: str) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise _Usage(f"config file not found: {p}")
    try:
        return TrainConfig.from_file(p)
    except ConfigError as exc:
        raise _Usage(f"{p}: {exc}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise _Usage(f"cannot read config {p}: {exc}") from exc


def _write_table(table, out: str | None, plot: str | None = None, series: str | None = None):
    if out:
        harness.emit_csv(table, out)
    else:
        sys.stdout.write(table.to_text())
    if plot:
        x = "psnr_test" if "psnr_test" in table.header else None
        harness.emit_plot(table, plot, x=x, series=series)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    train_set, _ = load_datasets(cfg)
    ckpt, metrics = train(cfg, train_set)
    save_checkpoint(ckpt, args.out)
    if args.metrics:
        Path(args.metrics).write_text(metrics.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(metrics.to_csv())
    print(f"# checkpoint {args.out} config_hash {cfg.config_hash()}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, test = load_datasets(ckpt.config)
    trials = args.trials if args.trials is not None else ckpt.config.eval_trials
    table = harness.CsvTable(("psnr_db", "accuracy", "std", "trials"))
    for psnr in args.psnr:
        r = evaluate(ckpt, test, psnr, trials=trials, seed=args.seed)
        table.append((float(psnr), r.accuracy, r.std, trials))
    sys.stdout.write(table.to_text())
    return 0


def _grid(args, **lists) -> harness.ExperimentGrid:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    lists = {k: tuple(v) for k, v in lists.items() if v}
    return harness.ExperimentGrid(base=cfg, repeats=args.repeats, **lists)


def cmd_sweep(args) -> int:
    grid = _grid(args, psnr_train=args.psnr_train, psnr_test=args.psnr_test)
    _write_table(harness.run_mismatch_sweep(grid), args.out, args.plot, "psnr_train")
    return 0


def cmd_ablate_beta(args) -> int:
    cfg = _load_config(args.config)
    grid = _grid(args, beta=args.betas, psnr_train=args.psnr_train or [cfg.psnr_train_db],
                 psnr_test=args.psnr_test)
    _write_table(harness.run_beta_ablation(grid), args.out, args.plot, "beta")
    return 0


def cmd_ablate_codebook(args) -> int:
    cfg = _load_config(args.config)
    grid = _grid(args, K=args.ks, d=args.ds or [cfg.d], psnr_train=[cfg.psnr_train_db],
                 beta=[cfg.beta])
    _write_table(harness.run_codebook_ablation(grid), args.out)
    return 0


def cmd_channel(args) -> int:
    if args.k < 2:
        raise _Usage("--k must be at least 2")
    sys.stdout.write(harness.channel_table(args.k, args.psnr, args.mc_samples, args.seed).to_text())
    return 0


def cmd_info(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, test = load_datasets(ckpt.config)
    T = transition_matrix(ckpt.config.K, psnr_to_sigma2(args.psnr))
    est = estimate_i_z_zhat(encoder_distributions(ckpt, test), T)
    table = harness.CsvTable(("psnr", "i_z_zhat_bits", "h_zhat_bits", "h_zhat_given_z_bits",
                              "capacity_bits", "capacity_total_bits", "encoder_entropy"))
    ln2 = math.log(2)
    table.append((float(args.psnr), est.i_z_zhat_bits, est.h_zhat / ln2,
                  est.h_zhat_given_z / ln2, est.capacity, est.capacity_total_bits,
                  harness.mean_encoder_entropy(ckpt, test)))
    sys.stdout.write(table.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtjscc", description="Discrete task-oriented JSCC over K-PSK channels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="model.dtj")
    s.add_argument("--metrics", help="write the per-epoch metrics CSV here instead of stdout")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="test accuracy of a checkpoint at one or more PSNRs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--psnr", type=_floats, required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    def grid_args(s):
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--repeats", type=int, default=3)
        s.add_argument("--out", help="CSV path (default: stdout)")

    s = sub.add_parser("sweep", help="train at each psnr-train, test at each psnr-test")
    grid_args(s)
    s.add_argument("--psnr-train", type=_floats, required=True)
    s.add_argument("--psnr-test", type=_floats, required=True)
    s.add_argument("--plot", help="also write an SVG chart")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ablate-beta", help="accuracy, entropy and I(Z;Zhat) per beta")
    grid_args(s)
    s.add_argument("--betas", type=_floats, default=[0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0])
    s.add_argument("--psnr-train", type=_floats)
    s.add_argument("--psnr-test", type=_floats, default=[4.0, 8.0, 12.0, 16.0, 20.0])
    s.add_argument("--plot", help="also write an SVG chart")
    s.set_defaults(func=cmd_ablate_beta)

    s = sub.add_parser("ablate-codebook", help="accuracy per codebook size K (and split d)")
    grid_args(s)
    s.add_argument("--ks", type=_ints, required=True)
    s.add_argument("--ds", type=_ints)
    s.set_defaults(func=cmd_ablate_codebook)

    s = sub.add_parser("channel", help="SER and capacity of the K-PSK channel")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--psnr", type=_floats, required=True)
    s.add_argument("--mc-samples", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_channel)

    s = sub.add_parser("info", help="I(Z;Zhat) of a checkpoint's encoder over a channel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--psnr", type=float, required=True)
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except _Usage as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DtJsccError, OSError) as exc:
        print(f"dtjscc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
