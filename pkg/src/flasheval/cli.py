"""Command-line entry point: ``flasheval <experiment> [options]``.

Writes ``<experiment>.csv`` and ``<experiment>_report.txt`` to the output
directory (``--out``, else ``out`` from the config, else ``$FLASHEVAL_OUT``,
else ``./flasheval_out``).

Exit codes: 0 all checks passed, 1 a check failed, 2 configuration error,
3 numeric fault (NaN or Inf).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import KINDS, ConfigError, parse_config
from .experiments import run, write_csv
from .tensor import NumericalError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flasheval", description="Independent vs joint list evaluator benchmarks.")
    p.add_argument("experiment", choices=KINDS)
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", metavar="N[,N...]", help="comma-separated seeds")
    p.add_argument("--k-sweep", metavar="LIST", help="comma-separated list counts")
    p.add_argument("--parallel", metavar="N", help="worker threads across seeds")
    p.add_argument("--variant", metavar="NAME", help="restrict to one architecture")
    return p


def _output_dir(arg: str | None, from_config: str) -> Path:
    out = Path(arg or from_config or os.environ.get("FLASHEVAL_OUT") or "flasheval_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not usable: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {"seeds": args.seed, "k_sweep": args.k_sweep, "parallel": args.parallel, "variant": args.variant}
    overrides = {k: v for k, v in flags.items() if v is not None}
    try:
        cfg = parse_config(args.config, overrides, kind=args.experiment)
        out = _output_dir(args.out, cfg.out)
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(out / f"{cfg.kind}.csv", "w", newline="", encoding="utf-8") as fh:
        write_csv(result.rows, fh)
    report = result.report()
    (out / f"{cfg.kind}_report.txt").write_text(report, encoding="utf-8")
    (out / f"{cfg.kind}_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    sys.stdout.write(report)
    if not result.ok:
        print(f"{len(result.failures)} check(s) failed:", file=sys.stderr)
        for c in result.failures:
            print(f"  {c.name}: {c.detail}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
