"""Common utilities for the simulator commands."""

import argparse
import logging
from functools import wraps
from typing import Callable

from pydantic import ValidationError

from libraries.config import RunConfig, load_config
from libraries.errors import AcceptanceError, ConfigError, FsiError
from libraries.fsi_settings import FsiSettings

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4

SCHEME_FLAGS = {"semi": "semi_implicit", "full": "fully_implicit"}


def exit_code_for(exc: FsiError) -> int:
    """Map a simulator error to the process exit status."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, AcceptanceError):
        return EXIT_ACCEPTANCE
    return EXIT_NUMERICAL


def cli_command(parser: argparse.ArgumentParser) -> Callable:
    """Return a decorator that binds a command handler to its sub-parser.

    The handler is logged when called and simulator errors are turned into
    exit statuses.

    Args:
        parser (argparse.ArgumentParser): The sub-parser of the command.

    Returns:
        A decorator for handlers taking the parsed arguments.
    """
    def decorator(func: Callable[[argparse.Namespace], int]) -> Callable[[argparse.Namespace], int]:
        @wraps(func)
        def wrapper(args: argparse.Namespace) -> int:
            logging.info(f"[Command] {func.__name__}")
            try:
                return func(args)
            except FsiError as exc:
                logging.error(f"[Command] {func.__name__} failed: {exc}")
                return exit_code_for(exc)
        parser.set_defaults(handler=wrapper)
        return wrapper
    return decorator


def add_common_arguments(parser: argparse.ArgumentParser, default_out: str) -> None:
    """Arguments shared by every command."""
    parser.add_argument("--config", default="configs/default.ini", help="Configuration file.")
    parser.add_argument("--out", default=default_out, help="Output directory.")
    parser.add_argument("--overwrite", action="store_true", help="Reuse a non-empty output directory.")
    parser.add_argument("--scheme", choices=sorted(SCHEME_FLAGS), help="Time stepping scheme.")
    parser.add_argument("--ustar", choices=["appendix", "scheme_r"], help="Extrapolation in the height-rate term.")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the configuration file and apply command-line overrides.

    Args:
        args (argparse.Namespace): Parsed arguments.

    Returns:
        The validated configuration.
    """
    config = load_config(args.config)
    data = config.model_dump()
    if getattr(args, "scheme", None):
        data["simulation"]["scheme"] = SCHEME_FLAGS[args.scheme]
    if getattr(args, "ustar", None):
        data["simulation"]["ustar"] = args.ustar
    if getattr(args, "axis", None):
        data["convergence"]["axis"] = args.axis
    if getattr(args, "levels", None) is not None:
        data["convergence"]["levels"] = args.levels
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(f"{'.'.join(str(p) for p in error['loc'])}: {error['msg']}") from exc


def process_settings() -> FsiSettings:
    """Process settings from the environment, invalid values reported as ``ConfigError``."""
    try:
        return FsiSettings()
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(f"invalid {error['loc'][0]}: {error['msg']}") from exc


def assembly_threads() -> int:
    """Element assembly threads from the environment."""
    return process_settings().FSI_THREADS


def run_seed() -> int:
    """Seed recorded in the manifest of every command."""
    return process_settings().FSI_SEED
