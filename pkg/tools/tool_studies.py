"""Refinement studies: ``convergence`` and ``compare``.

This module provides a registrar class that adds the commands running
families of simulations against a finer reference to the command-line parser.
"""

import argparse
import logging
import math
from functools import reduce

from libraries.config import CompareSettings, ConvergenceSettings
from libraries.diagnostics import (
    ERROR_COLUMNS,
    ErrorTable,
    error_norms,
    fit_rate,
    velocity_difference_l2l2,
    write_agreement_csv,
    write_compare_csv,
    write_error_csv,
)
from libraries.errors import AcceptanceError
from libraries.io_utils import RunManifest, prepare_output_dir
from libraries.stepper import SimulationConfig, Trajectory, build_mesh_for, run
from tools.tool_common import EXIT_OK, add_common_arguments, assembly_threads, cli_command, resolve_config, run_seed

LINEAR_IN_H = ("gradetaLiL2", "graduL2L2")


def _with(sim: SimulationConfig, **update: object) -> SimulationConfig:
    return SimulationConfig.model_validate({**sim.model_dump(), **update})


def _refined(sim: SimulationConfig, refinements: int) -> SimulationConfig:
    return _with(sim, mesh={**sim.mesh.model_dump(), "refinements": refinements})


def run_convergence_ladder(
    sim: SimulationConfig,
    settings: ConvergenceSettings,
    threads: int = 1,
) -> ErrorTable:
    """Run a refinement ladder and its reference, and fit the error slopes.

    Args:
        sim (SimulationConfig): Coarsest level; its tau and mesh start the ladder.
        settings (ConvergenceSettings): Axis, number of levels, reference depth.
        threads (int): Element assembly threads.

    Returns:
        The error table with fitted slopes.
    """
    if settings.final_time is not None:
        sim = _with(sim, final_time=settings.final_time)
    last = settings.levels - 1
    if settings.axis == "tau":
        levels = [_with(sim, tau=sim.tau / 2**i) for i in range(settings.levels)]
        reference = _with(sim, tau=sim.tau / 2 ** (last + settings.reference_levels))
        keep_every = 2**settings.reference_levels
        disc = build_mesh_for(sim, threads)
        discs = [disc] * settings.levels
        ref_disc = disc
    else:
        base = sim.mesh.refinements
        levels = [_refined(sim, base + i) for i in range(settings.levels)]
        reference = _refined(sim, base + last + settings.reference_levels)
        keep_every = 1
        discs = [build_mesh_for(level, threads) for level in levels]
        ref_disc = build_mesh_for(reference, threads)

    logging.info(
        f"[Convergence] {settings.axis} ladder with {settings.levels} levels, "
        f"reference tau={reference.tau:.3e} on {ref_disc.mesh.nx}x{ref_disc.mesh.ny}.",
    )
    ref_traj = run(reference, threads=threads, keep_every=keep_every, disc=ref_disc)
    table = ErrorTable(
        axis=settings.axis,
        reference=reference.tau if settings.axis == "tau" else ref_disc.mesh.h,
    )
    for level, disc in zip(levels, discs, strict=True):
        traj = run(level, threads=threads, disc=disc)
        table.rows.append(error_norms(traj, ref_traj))
    table.fit()
    return table


def check_convergence_slopes(table: ErrorTable, settings: ConvergenceSettings) -> list[str]:
    """Slopes below their floor; slopes above their ceiling are only logged."""
    violations = []
    for name in ERROR_COLUMNS:
        quadratic = table.axis == "h" and name not in LINEAR_IN_H
        floor = settings.quadratic_floor if quadratic else settings.linear_floor
        ceiling = settings.quadratic_ceiling if quadratic else settings.linear_ceiling
        slope = table.slopes[name]
        if slope < floor:
            violations.append(f"{name} slope {slope:.3f} < {floor}")
        elif slope > ceiling:
            logging.warning(f"[Convergence] {name} slope {slope:.3f} above {ceiling}.")
    return violations


def run_comparison(sim: SimulationConfig, settings: CompareSettings, threads: int = 1) -> tuple[list[dict], list[float]]:
    """Run both schemes at every tau against one semi-implicit reference.

    Args:
        sim (SimulationConfig): Physics, mesh and solver settings.
        settings (CompareSettings): Time steps and reference depth.
        threads (int): Element assembly threads.

    Returns:
        Comparison rows keyed by ``COMPARE_COLUMNS`` and the velocity
        difference of the two schemes at every tau.
    """
    if settings.final_time is not None:
        sim = _with(sim, final_time=settings.final_time)
    disc = build_mesh_for(sim, threads)
    ref_tau = min(settings.taus) / 2**settings.reference_levels
    keep_every = reduce(math.gcd, (round(tau / ref_tau) for tau in settings.taus))
    ref_traj = run(_with(sim, tau=ref_tau, scheme="semi_implicit"), threads=threads, keep_every=keep_every, disc=disc)

    rows: list[dict] = []
    differences: list[float] = []
    for tau in settings.taus:
        trajs: dict[str, Trajectory] = {}
        for scheme in ("semi_implicit", "fully_implicit"):
            traj = run(_with(sim, tau=tau, scheme=scheme), threads=threads, disc=disc)
            errors = error_norms(traj, ref_traj)
            rows.append(
                {
                    "tau": tau,
                    "scheme": scheme,
                    **{name: getattr(errors, name) for name in ERROR_COLUMNS},
                    "newton_avg": traj.average_newton_iterations,
                    "t_assembly": traj.times.assembly,
                    "t_factorization": traj.times.factorization,
                    "t_solve": traj.times.solve,
                    "wall_clock": traj.wall_clock,
                },
            )
            trajs[scheme] = traj
        differences.append(velocity_difference_l2l2(trajs["semi_implicit"], trajs["fully_implicit"]))
        logging.info(f"[Compare] tau={tau:.3e}: semi/full velocity difference {differences[-1]:.3e}.")
    return rows, differences


class StudyToolsRegistrar:
    """Registrar for the refinement study commands."""

    def __init__(self, subparsers: argparse._SubParsersAction) -> None:
        """Initialize StudyToolsRegistrar.

        Args:
            subparsers (argparse._SubParsersAction): Sub-command collection of the main parser.
        """
        self.subparsers = subparsers

    def register(self) -> None:
        """Register all study commands."""
        self.tool_convergence()
        self.tool_compare()

    def tool_convergence(self) -> None:
        """Register the convergence command."""
        parser = self.subparsers.add_parser("convergence", help="Run a mesh-size or time-step ladder.")
        add_common_arguments(parser, default_out="output/convergence")
        parser.add_argument("--axis", choices=["h", "tau"], help="Refined parameter.")
        parser.add_argument("--levels", type=int, help="Ladder levels, at least 3.")

        @cli_command(parser)
        def convergence(args: argparse.Namespace) -> int:
            """Run the ladder, write ``errors_<axis>.csv`` and check the slopes.

            Args:
                args (argparse.Namespace): Parsed arguments.

            Returns:
                Exit status.
            """
            config = resolve_config(args)
            out = prepare_output_dir(args.out, args.overwrite)
            manifest = RunManifest(command="convergence", config=config, output_dir=str(out), seed=run_seed())
            table = run_convergence_ladder(config.simulation, config.convergence, threads=assembly_threads())
            write_error_csv(table, str(out / f"errors_{table.axis}.csv"))
            manifest.write()

            print(", ".join(f"{name}={slope:.3f}" for name, slope in table.slopes.items()))
            violations = check_convergence_slopes(table, config.convergence)
            if violations:
                raise AcceptanceError("; ".join(violations))
            return EXIT_OK

    def tool_compare(self) -> None:
        """Register the compare command."""
        parser = self.subparsers.add_parser("compare", help="Compare the semi- and fully implicit schemes.")
        add_common_arguments(parser, default_out="output/compare")

        @cli_command(parser)
        def compare(args: argparse.Namespace) -> int:
            """Run both schemes, write ``compare.csv`` and ``agreement.csv``.

            Args:
                args (argparse.Namespace): Parsed arguments.

            Returns:
                Exit status.
            """
            config = resolve_config(args)
            settings = config.compare
            out = prepare_output_dir(args.out, args.overwrite)
            manifest = RunManifest(command="compare", config=config, output_dir=str(out), seed=run_seed())
            rows, differences = run_comparison(config.simulation, settings, threads=assembly_threads())

            slope = None
            if any(value > 0.0 for value in differences):
                slope = fit_rate(settings.taus, differences)
            else:
                logging.info("[Compare] both schemes produced identical trajectories.")
            write_compare_csv(rows, str(out / "compare.csv"))
            write_agreement_csv(settings.taus, differences, slope, str(out / "agreement.csv"))
            clock = {
                scheme: sum(r["wall_clock"] for r in rows if r["scheme"] == scheme)
                for scheme in ("semi_implicit", "fully_implicit")
            }
            manifest.timings = clock
            manifest.write()

            newton = max(r["newton_avg"] for r in rows if r["scheme"] == "fully_implicit")
            print(
                f"slope={'n/a' if slope is None else f'{slope:.3f}'} semi={clock['semi_implicit']:.2f}s "
                f"full={clock['fully_implicit']:.2f}s newton_avg<={newton:.2f}",
            )
            violations = []
            if slope is not None and not settings.slope_floor <= slope <= settings.slope_ceiling:
                violations.append(f"agreement slope {slope:.3f} outside [{settings.slope_floor}, {settings.slope_ceiling}]")
            if clock["semi_implicit"] >= clock["fully_implicit"]:
                violations.append("semi-implicit scheme is not faster than the fully implicit one")
            if newton > settings.newton_max:
                violations.append(f"average Newton iterations {newton:.2f} > {settings.newton_max}")
            if violations:
                raise AcceptanceError("; ".join(violations))
            return EXIT_OK
