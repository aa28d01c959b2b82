"""Command-line interface: run experiments, reshape plot data.

Commands:
    gmmcv run <config>        run an experiment config, write its bundle
    gmmcv plot-data <bundle>  emit long-format plot_data.csv for a bundle
    gmmcv list-experiments    show registered experiments and their keys

The output root defaults to the current directory and can be moved with
the GMMCV_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError
from .experiments import EXPERIMENTS, OUTPUT_ROOT_ENV, emit_plot_data, run_config_file

log = logging.getLogger("gmmcv")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmcv",
        description="cross-validated model selection for GMM-estimated models",
        epilog=f"output root: current directory, or ${OUTPUT_ROOT_ENV} if set",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config", help="path to a key-value config file")

    p_plot = sub.add_parser("plot-data", help="emit plot-ready CSV for a bundle")
    p_plot.add_argument("bundle", help="path to a result bundle directory")

    sub.add_parser("list-experiments", help="list experiments and config keys")
    return parser


def _list_experiments() -> None:
    for name, exp in sorted(EXPERIMENTS.items()):
        print(f"{name}: {exp.description}")
        for key, spec in sorted(exp.schema.items()):
            if spec.required:
                detail = "required"
            else:
                detail = f"default {spec.default!r}"
            suffix = f"  # {spec.help}" if spec.help else ""
            print(f"  {key} ({spec.type}, {detail}){suffix}")
        print()


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "run":
            outdir = run_config_file(args.config)
            log.info("bundle written to %s", outdir)
            print(outdir)
        elif args.command == "plot-data":
            out = emit_plot_data(args.bundle)
            log.info("plot data written to %s", out)
            print(out)
        elif args.command == "list-experiments":
            _list_experiments()
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any failure as nonzero exit
        log.error("experiment failed: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
