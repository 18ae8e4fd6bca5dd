"""Read run configurations from sectioned ``key = value`` files.

Sections map onto the pydantic models of the simulator::

    [physics]      rho_f, rho_s, mu, gamma1, gamma2, gamma3, length
    [forcing]      amplitude, frequency, switch_off
    [mesh]         nx, ny, refinements, structure_bc
    [time]         tau, final_time
    [solver]       scheme, ustar, contact_floor, abs_tol, rel_tol,
                   max_iterations, jacobian, predictor
    [output]       snapshot_every, final_state, dump_matrix
    [convergence]  axis, levels, reference_levels, final_time, linear_floor,
                   linear_ceiling, quadratic_floor, quadratic_ceiling
    [compare]      taus, reference_levels, final_time, slope_floor,
                   slope_ceiling, newton_max
"""

import configparser
import logging
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from libraries.errors import ConfigError
from libraries.stepper import SimulationConfig

SECTION_PATHS: dict[str, tuple[str, ...]] = {
    "physics": ("simulation", "physics"),
    "forcing": ("simulation", "physics", "forcing"),
    "mesh": ("simulation", "mesh"),
    "time": ("simulation",),
    "output": ("simulation", "output"),
    "convergence": ("convergence",),
    "compare": ("compare",),
}
SOLVER_TOP_LEVEL = ("scheme", "ustar", "contact_floor")


class ConvergenceSettings(BaseModel):
    """Refinement ladder of a convergence study and its acceptance bands."""

    model_config = ConfigDict(extra="forbid")

    axis: Literal["h", "tau"] = "tau"
    levels: Annotated[int, Field(default=4, ge=3)]
    reference_levels: Annotated[int, Field(default=2, ge=1)]
    final_time: Annotated[float | None, Field(default=None, gt=0)]
    linear_floor: float = 0.8
    linear_ceiling: float = 1.4
    quadratic_floor: float = 1.6
    quadratic_ceiling: float = 2.4


class CompareSettings(BaseModel):
    """Semi- against fully implicit comparison."""

    model_config = ConfigDict(extra="forbid")

    taus: list[float] = Field(default_factory=lambda: [4e-3, 2e-3, 1e-3])
    reference_levels: Annotated[int, Field(default=2, ge=1)]
    final_time: Annotated[float | None, Field(default=None, gt=0)]
    slope_floor: float = 0.8
    slope_ceiling: float = 1.4
    newton_max: Annotated[float, Field(default=5.0, ge=1)]

    @field_validator("taus", mode="before")
    @classmethod
    def split_taus(cls, value: object) -> object:
        """Accept a comma separated list."""
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("taus")
    @classmethod
    def check_taus(cls, value: list[float]) -> list[float]:
        """Require at least three positive, distinct steps."""
        if len(value) < 3 or any(tau <= 0 for tau in value) or len(set(value)) != len(value):
            raise ValueError("taus needs at least three distinct positive values")
        return sorted(value, reverse=True)


class RunConfig(BaseModel):
    """Everything a command needs."""

    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    convergence: ConvergenceSettings = Field(default_factory=ConvergenceSettings)
    compare: CompareSettings = Field(default_factory=CompareSettings)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """1-based line of every ``key = value`` entry, per section."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        for sep in ("=", ":"):
            if sep in line:
                lines[(section, line.split(sep, 1)[0].strip().lower())] = number
                break
    return lines


def _section_lines(text: str) -> dict[str, int]:
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            lines[line[1:-1].strip().lower()] = number
    return lines


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse and validate configuration text.

    Args:
        text (str): File contents.
        source (str): Name used in log messages.

    Returns:
        The validated configuration.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line) from exc

    key_lines = _key_lines(text)
    section_lines = _section_lines(text)
    data: dict = {}
    paths: dict[tuple[str, ...], int] = {}
    for section in parser.sections():
        name = section.lower()
        for key, value in parser.items(section):
            if name == "solver":
                path = ("simulation", key) if key in SOLVER_TOP_LEVEL else ("simulation", "newton", key)
            elif name in SECTION_PATHS:
                path = (*SECTION_PATHS[name], key)
            else:
                raise ConfigError(f"unknown section [{section}]", section_lines.get(name))
            node = data
            for part in path[:-1]:
                node = node.setdefault(part, {})
            node[path[-1]] = value
            paths[path] = key_lines.get((name, key), section_lines.get(name))

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = tuple(str(part) for part in error["loc"])
        line = None
        for size in range(len(loc), 0, -1):
            if loc[:size] in paths:
                line = paths[loc[:size]]
                break
        raise ConfigError(f"{'.'.join(loc)}: {error['msg']}", line) from exc
    logging.info(f"[Config] loaded {source}.")
    return config


def load_config(path: str) -> RunConfig:
    """Read and validate a configuration file.

    Args:
        path (str): Path of the file.

    Returns:
        The validated configuration.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, source=path)
