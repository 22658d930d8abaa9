"""Command-line entry point: ``calibrated-pcr <subcommand> [--config F] [--seed S] [--out D] [--workers K]``.

Exit status is 0 when every cell succeeded, 2 when some cells failed and
1 for configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, InputError
from .experiments import COLUMNS, DEFAULTS, RHO_CONVENTION, Report, manifest_text, run_experiment

log = logging.getLogger("calibrated_pcr")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return data


def write_report(report: Report, out_dir) -> Path:
    """Write ``report.csv``, ``resolved_config.json`` and ``figure_manifest.txt``; return the directory."""
    target = Path(out_dir) / report.subcommand / str(report.config["label"])
    target.mkdir(parents=True, exist_ok=True)
    with (target / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in report.rows:
            writer.writerow(row.cells())
    meta = {"subcommand": report.subcommand, "config": report.config}
    if report.subcommand in ("theory-vs-mc", "lambda-map", "method-compare"):
        meta["transform_convention"] = RHO_CONVENTION
    (target / "resolved_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (target / "figure_manifest.txt").write_text(manifest_text(report.subcommand), encoding="utf-8")
    return target


def build_parser():
    parser = argparse.ArgumentParser(prog="calibrated-pcr", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(DEFAULTS))
    parser.add_argument("--config", help="JSON file overriding the subcommand defaults")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", default="results", help="output root directory")
    parser.add_argument("--workers", type=int, default=1, help="process-pool size for scenario cells")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors; 2 is reserved for partial failure
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_ERROR
    if args.workers < 1:
        log.error("--workers must be at least 1")
        return EXIT_ERROR
    try:
        report = run_experiment(args.subcommand, load_config(args.config), args.seed, args.workers)
        target = write_report(report, args.out)
    except (ConfigurationError, InputError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    failed = report.failed
    print(f"{len(report.rows)} rows written to {target / 'report.csv'}")
    if failed:
        print(f"{len(failed)} failed cells", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
