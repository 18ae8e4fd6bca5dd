"""Configure logging, register the commands and dispatch the command line."""

import argparse
import logging
import pathlib
import sys
from datetime import date

from libraries.errors import ConfigError
from libraries.fsi_settings import FsiSettings
from tools.register_tools import register_tools
from tools.tool_common import EXIT_CONFIG, process_settings


def configure_logging(settings: FsiSettings) -> None:
    """Log to stderr and to a dated file in the configured log directory."""
    log_dir = pathlib.Path(settings.FSI_LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    today_date = date.today().strftime("%Y%m%d")
    logging.basicConfig(
        level=settings.FSI_LOG_LEVEL.upper(),
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(
                filename=log_dir / f"fsi_plate_{today_date}.log",
                mode="a",
                encoding="utf-8",
            ),
        ],
        encoding="utf-8",
    )


def build_parser() -> argparse.ArgumentParser:
    """Main parser with every command registered."""
    parser = argparse.ArgumentParser(
        prog="fsi_cli",
        description="Incompressible fluid coupled to an elastic plate on a moving domain.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_tools(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Parse the command line and run the selected command.

    Args:
        argv (list[str] | None): Arguments without the program name.

    Returns:
        Exit status: 0 ok, 2 configuration error, 3 numerical failure,
        4 acceptance violation.
    """
    try:
        settings = process_settings()
    except ConfigError as exc:
        logging.error(f"[Settings] {exc}")
        return EXIT_CONFIG
    configure_logging(settings)
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
