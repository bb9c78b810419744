"""Command line entry point: ``apfdrive run | dump-field | echo-config``.

Exit codes: 0 ok, 1 usage error, 2 invalid config, 3 runtime abort (I/O
failure or a trial that crashed the program). Failed trials are data and do
not change the exit code. The default output directory is taken from
APFDRIVE_OUT (fallback ``./runs``).
"""

import argparse
import logging
import os
import sys

from .config import PRESETS, ConfigError, dump_config, load_config, preset_path

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
OUT_ENV = "APFDRIVE_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_source(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--scenario", choices=PRESETS, help="bundled preset name")
    g.add_argument("--config", help="path to a scenario YAML file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apfdrive", description="NMPC with potential fields: scenario runner and tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="run a batch of closed-loop trials")
    _add_source(run)
    run.add_argument("--trials", type=int, help="number of trials (default: from config)")
    run.add_argument("--seed", type=int, help="seed of the first trial (default: from config)")
    run.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    run.add_argument("--parallel", type=int, default=1, help="worker processes")
    run.add_argument("--no-timing", action="store_true",
                     help="write solve_ms as 0 so that repeated runs are byte-identical")

    dump = sub.add_parser("dump-field", help="sample the potential field on a grid")
    _add_source(dump)
    for name in ("xmin", "xmax", "ymin", "ymax"):
        dump.add_argument(f"--{name}", type=float, required=True)
    dump.add_argument("--res", type=float, required=True, help="grid spacing [m]")
    dump.add_argument("--out", help="output CSV (default: <out dir>/<name>_field.csv)")

    echo = sub.add_parser("echo-config", help="print the fully expanded config")
    _add_source(echo)
    return parser


def _load(args):
    return load_config(args.config if args.config else preset_path(args.scenario))


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"apfdrive: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load(args)
    except ConfigError as exc:
        print(f"apfdrive: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "echo-config":
        sys.stdout.write(dump_config(config))
        return EXIT_OK

    if args.command == "run":
        if args.trials is not None and args.trials < 1:
            print("apfdrive: invalid config: trials: must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        if args.parallel < 1:
            print("apfdrive: error: --parallel must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        from .batch import SUMMARY_COLUMNS, run_batch

        out = args.out or _default_out()
        try:
            summary = run_batch(config, args.trials, args.seed, out, args.parallel,
                                record_timing=not args.no_timing)
        except OSError as exc:
            print(f"apfdrive: cannot write output: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        row = summary.row
        for key in SUMMARY_COLUMNS:
            print(f"{key:>22}: {row[key]}")
        print(f"{'output':>22}: {out}")
        return EXIT_RUNTIME if summary.crashed else EXIT_OK

    if args.command == "dump-field":
        from .batch import dump_field

        if not args.res > 0:
            print("apfdrive: error: --res must be > 0", file=sys.stderr)
            return EXIT_USAGE
        if args.xmax < args.xmin or args.ymax < args.ymin:
            print("apfdrive: error: grid bounds must satisfy min <= max", file=sys.stderr)
            return EXIT_USAGE
        out = args.out or os.path.join(_default_out(), f"{config.name}_field.csv")
        try:
            n = dump_field(config, args.xmin, args.xmax, args.ymin, args.ymax, args.res, out)
        except OSError as exc:
            print(f"apfdrive: cannot write output: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"wrote {n} grid points to {out}")
        return EXIT_OK
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
