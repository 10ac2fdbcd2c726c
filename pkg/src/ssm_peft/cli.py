"""Command-line entry point: train, bench, verify, plot."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="ssm-peft", description="PEFT experiments and oracles for deep S4/S6 models.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    t = sub.add_parser("train", help="run every seed x adapter in a config and write metrics.csv")
    t.add_argument("config", help="JSON experiment config")
    t.add_argument("--output-dir", help="override the config's output_dir")
    t.add_argument("--quiet", action="store_true", help="no per-run progress lines")
    b = sub.add_parser("bench", help="like train, plus plot.svg of best metric vs trainable percent")
    b.add_argument("config", help="JSON experiment config")
    b.add_argument("--output-dir", help="override the config's output_dir")
    b.add_argument("--quiet", action="store_true", help="no per-run progress lines")
    v = sub.add_parser("verify", help="run the numerical oracles, one line per instance")
    v.add_argument("--oracle", action="append", metavar="NAME", help="oracle to run (repeatable; default all)")
    v.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    v.add_argument("--trials", type=int, default=10, help="random instances per oracle (default 10)")
    v.add_argument("--list", action="store_true", help="list oracle names and exit")
    pl = sub.add_parser("plot", help="render a metrics CSV as SVG")
    pl.add_argument("metrics", help="metrics.csv from train or bench")
    pl.add_argument("out", help="output SVG path")
    pl.add_argument("--linear-y", action="store_true", help="linear instead of log y axis")
    pl.add_argument("--y-label", default="best MSE")
    return p


def _sweep(args, plot):
    from .harness import load_config, run_bench, run_experiment

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    out = args.output_dir or cfg.output_dir
    try:
        rows = (run_bench if plot else run_experiment)(cfg, out, log)
    except OSError as exc:
        print(f"I/O failure at {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {len(rows)} rows to {out}/metrics.csv")
    if cfg.task == "oracle-suite":
        return EXIT_OK if all(r["passed"] for r in rows) else EXIT_FAIL
    return EXIT_OK


def _verify(args):
    from .theory import ORACLES, run_oracles

    if args.list:
        print("\n".join(ORACLES))
        return EXIT_OK
    if args.trials < 1:
        print("--trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    for name in args.oracle or ():
        if name not in ORACLES:
            print(f"unknown oracle {name!r}; choose from {', '.join(ORACLES)}", file=sys.stderr)
            return EXIT_USAGE
    reports = run_oracles(args.oracle, seed=args.seed, trials=args.trials)
    for r in reports:
        print(r.line(), flush=True)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} passed")
    return EXIT_FAIL if failed else EXIT_OK


def _plot(args):
    from .harness import plot_svg, read_metrics

    try:
        rows = read_metrics(args.metrics)
        plot_svg(rows, args.out, log_y=not args.linear_y, y_label=args.y_label)
    except OSError as exc:
        print(f"I/O failure at {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command == "train":
        return _sweep(args, plot=False)
    if args.command == "bench":
        return _sweep(args, plot=True)
    if args.command == "verify":
        return _verify(args)
    return _plot(args)


if __name__ == "__main__":
    sys.exit(main())
