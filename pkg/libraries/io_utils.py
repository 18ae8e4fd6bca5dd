"""Output directories, run manifests and final-state dumps."""

import hashlib
import logging
import pathlib
from datetime import datetime

import numpy as np
from pydantic import BaseModel, Field

from libraries.config import RunConfig
from libraries.errors import ConfigError
from libraries.stepper import State


class RunManifest(BaseModel):
    """Record of one command invocation, written next to its artifacts."""

    command: str
    config: RunConfig
    output_dir: str
    seed: int
    build_id: str = Field(default_factory=lambda: build_identifier())
    started_at: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    timings: dict[str, float] = Field(default_factory=dict)

    def write(self) -> pathlib.Path:
        """Write ``manifest.json`` into the output directory."""
        path = pathlib.Path(self.output_dir) / "manifest.json"
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        logging.info(f"[Output] wrote {path}.")
        return path


def build_identifier() -> str:
    """Short digest of the package sources, stable for identical code."""
    root = pathlib.Path(__file__).resolve().parent.parent
    digest = hashlib.sha1(usedforsecurity=False)
    for path in sorted([*root.glob("libraries/*.py"), *root.glob("tools/*.py"), root / "fsi_cli.py"]):
        if path.is_file():
            digest.update(path.name.encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def prepare_output_dir(path: str, overwrite: bool = False) -> pathlib.Path:
    """Create an empty output directory.

    Args:
        path (str): Directory path.
        overwrite (bool): Allow a non-empty existing directory.

    Returns:
        The directory.
    """
    out = pathlib.Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {path} is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {path} is not empty, pass --overwrite to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_final_state(path: pathlib.Path | str, state: State) -> None:
    """Dump the arrays of a state as ``.npz``."""
    np.savez(
        path,
        t=state.t,
        step=state.step,
        velocity=state.velocity,
        pressure=state.pressure,
        displacement=state.displacement,
        curvature=state.curvature,
        displacement_geom=state.displacement_geom,
    )
    logging.info(f"[Output] wrote final state {path}.")
