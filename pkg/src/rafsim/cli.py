"""Command-line entry points.

    rafsim {drift,compare,interp,scaling,theory,embed} [--config PATH] [--seed N] [--out DIR] [--workers N]

Exit status: 0 on success, 2 for config errors, 3 when a run produces a
non-finite value.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load
from .federated import NumericalError
from .report import header_line, write_csv, write_json

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("drift", "compare", "interp", "scaling", "theory", "embed")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rafsim", description="Resolution-adaptive federated learning simulator.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="flat key = value config file (defaults if omitted)")
    p.add_argument("--seed", type=_u64, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output directory (default: results/<command>)")
    p.add_argument("--workers", type=_positive, default=1, help="parallel clients per round")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: ExperimentConfig, out: Path, workers: int = 1) -> list[Path]:
    """Run one experiment and write its artifacts; returns the files written."""
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.sha256()
    header = header_line(digest, cfg.seed)
    written = [out / "config.txt"]
    written[0].write_text(header + "\n" + cfg.dumps(), encoding="utf-8")

    if command == "drift":
        models: list = []
        rows = ex.drift_table(cfg, workers, models)
        written.append(write_csv(out / "drift.csv", ex.DRIFT_COLUMNS, rows, header))
        ex.write_logs(models, out / "rounds", header)
    elif command == "compare":
        trained: dict = {}
        rows = ex.compare_table(cfg, workers, trained)
        written.append(write_csv(out / "compare.csv", ex.COMPARE_COLUMNS, rows, header))
        ex.write_logs(list(trained.values()), out / "rounds", header)
    elif command == "interp":
        rows = ex.interp_table(cfg, workers)
        written.append(write_csv(out / "interp.csv", ex.INTERP_COLUMNS, rows, header))
    elif command == "scaling":
        rows = ex.scaling_table(cfg, workers)
        written.append(write_csv(out / "scaling.csv", ex.SCALING_COLUMNS, rows, header))
    elif command == "theory":
        report, gap_rows = ex.theory_report(cfg)
        written.append(write_json(out / "theory.json", report, digest, cfg.seed))
        written.append(write_csv(out / "gap.csv", ex.GAP_COLUMNS, gap_rows, header))
    elif command == "embed":
        columns, rows = ex.embedding_rows(cfg, workers)
        written.append(write_csv(out / "embeddings.csv", columns, rows, header))
    else:
        raise ValueError(f"unknown command {command!r}")
    return written


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path("results") / args.command
    try:
        for path in run(args.command, cfg, out, args.workers):
            print(path)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
