"""Single-run commands: ``run`` and ``energy-check``.

This module provides a registrar class that adds the commands driving one
simulation at a time to the command-line parser.
"""

import argparse
import dataclasses
import logging

from libraries.diagnostics import write_energy_csv, write_gcl_csv
from libraries.errors import AcceptanceError
from libraries.io_utils import RunManifest, prepare_output_dir, write_final_state
from libraries.stepper import Trajectory, run
from tools.tool_common import EXIT_OK, add_common_arguments, assembly_threads, cli_command, resolve_config, run_seed

ENERGY_TOL = 1e-10
GCL_TOL = 1e-12


def timing_summary(traj: Trajectory) -> dict[str, float]:
    """Per-phase wall-clock totals of a run, plus the overall wall-clock."""
    return {**dataclasses.asdict(traj.times), "wall_clock": traj.wall_clock}


def gcl_rows(traj: Trajectory) -> list[tuple[int, float, float]]:
    """(step, t, int xi) of every step."""
    return [(record.step, record.t, record.gcl) for record in traj.records]


class SimulationToolsRegistrar:
    """Registrar for the single-run commands."""

    def __init__(self, subparsers: argparse._SubParsersAction) -> None:
        """Initialize SimulationToolsRegistrar.

        Args:
            subparsers (argparse._SubParsersAction): Sub-command collection of the main parser.
        """
        self.subparsers = subparsers

    def register(self) -> None:
        """Register all single-run commands."""
        self.tool_run()
        self.tool_energy_check()

    def tool_run(self) -> None:
        """Register the run command."""
        parser = self.subparsers.add_parser("run", help="Run one simulation and write its diagnostics.")
        add_common_arguments(parser, default_out="output/run")

        @cli_command(parser)
        def run_simulation(args: argparse.Namespace) -> int:
            """Run the configured simulation.

            Writes ``energy.csv``, ``gcl.csv``, VTK snapshots at the configured
            cadence, ``final_state.npz`` and ``manifest.json``.

            Args:
                args (argparse.Namespace): Parsed arguments.

            Returns:
                Exit status.
            """
            config = resolve_config(args)
            out = prepare_output_dir(args.out, args.overwrite)
            manifest = RunManifest(command="run", config=config, output_dir=str(out), seed=run_seed())
            sim = config.simulation

            traj = run(sim, threads=assembly_threads(), out_dir=str(out), keep_every=sim.n_steps)
            write_energy_csv(traj.energy_reports, str(out / "energy.csv"))
            write_gcl_csv(gcl_rows(traj), str(out / "gcl.csv"))
            if sim.output.final_state:
                write_final_state(out / "final_state.npz", traj.final_state)
            manifest.timings = timing_summary(traj)
            manifest.write()

            final = traj.records[-1]
            min_height = min(record.min_height for record in traj.records)
            print(
                f"t={final.t:.6g} energy={final.report.energy:.6e} "
                f"min_height={min_height:.6f} wall_clock={traj.wall_clock:.2f}s",
            )
            return EXIT_OK

    def tool_energy_check(self) -> None:
        """Register the energy-check command."""
        parser = self.subparsers.add_parser(
            "energy-check",
            help="Check the per-step energy identity and the volume conservation.",
        )
        add_common_arguments(parser, default_out="output/energy_check")

        @cli_command(parser)
        def energy_check(args: argparse.Namespace) -> int:
            """Run the semi-implicit scheme under both extrapolation conventions.

            Both ledgers are written; only the ``scheme_r`` ledger is required
            to close, the ``appendix`` one is reported. Every step of both runs
            must conserve the domain volume.

            Args:
                args (argparse.Namespace): Parsed arguments.

            Returns:
                Exit status.
            """
            config = resolve_config(args)
            out = prepare_output_dir(args.out, args.overwrite)
            manifest = RunManifest(command="energy-check", config=config, output_dir=str(out), seed=run_seed())
            length = config.simulation.physics.length

            worst_energy: dict[str, float] = {}
            worst_gcl = 0.0
            for ustar in ("scheme_r", "appendix"):
                sim = config.simulation.model_copy(update={"scheme": "semi_implicit", "ustar": ustar})
                traj = run(sim, threads=assembly_threads(), keep_every=sim.n_steps)
                write_energy_csv(traj.energy_reports, str(out / f"energy_{ustar}.csv"))
                write_gcl_csv(gcl_rows(traj), str(out / f"gcl_{ustar}.csv"))
                worst_energy[ustar] = max(report.relative_residual for report in traj.energy_reports)
                worst_gcl = max(worst_gcl, *(abs(record.gcl) for record in traj.records))
                manifest.timings.update({f"{ustar}_{k}": v for k, v in timing_summary(traj).items()})
                logging.info(f"[Energy] {ustar}: worst relative ledger residual {worst_energy[ustar]:.3e}.")
            manifest.write()

            print(
                f"scheme_r={worst_energy['scheme_r']:.3e} appendix={worst_energy['appendix']:.3e} "
                f"gcl={worst_gcl:.3e}",
            )
            violations = []
            if worst_energy["scheme_r"] > ENERGY_TOL:
                violations.append(f"energy ledger residual {worst_energy['scheme_r']:.3e} > {ENERGY_TOL:g}")
            if worst_gcl > GCL_TOL * length:
                violations.append(f"volume change {worst_gcl:.3e} > {GCL_TOL * length:g}")
            if violations:
                raise AcceptanceError("; ".join(violations))
            return EXIT_OK

