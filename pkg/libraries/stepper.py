"""Time marching of the coupled problem: the linear semi-implicit step and the Newton step."""

import logging
import math
import os
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Annotated, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from libraries.assembly import (
    Discretization,
    PhysicalParams,
    UStar,
    assemble_fully_implicit_jacobian,
    assemble_fully_implicit_residual,
    assemble_semi_implicit,
    build_discretization,
    initial_curvature,
    pack_newton,
    unpack_newton,
)
from libraries.diagnostics import EnergyReport, energy_ledger, gcl_residual
from libraries.errors import ContactError, ConvergenceError
from libraries.geometry import DisplacementExtension, deformed_vertices
from libraries.linsolve import OrderingCache, dump_matrix_market, factorize, solve
from libraries.mesh import build_reference_mesh, refine_uniform
from libraries.operators import project_initial_velocity, riesz_project
from libraries.spaces import StructureBC

Scheme = Literal["semi_implicit", "fully_implicit"]
STEP_COUNT_TOL = 1e-9


class MeshSpec(BaseModel):
    """Grid of the reference rectangle."""

    model_config = ConfigDict(extra="forbid")

    nx: Annotated[int, Field(default=16, ge=2)]
    ny: Annotated[int, Field(default=8, ge=1)]
    refinements: Annotated[int, Field(default=0, ge=0)]
    structure_bc: StructureBC = "periodic"


class NewtonSettings(BaseModel):
    """Stopping rule and Jacobian of the fully implicit step."""

    model_config = ConfigDict(extra="forbid")

    abs_tol: Annotated[float, Field(default=1e-10, gt=0)]
    rel_tol: Annotated[float, Field(default=1e-9, gt=0)]
    max_iterations: Annotated[int, Field(default=25, ge=1)]
    jacobian: Literal["analytic", "finite_difference"] = "analytic"
    predictor: bool = False


class OutputSettings(BaseModel):
    """What a run writes besides the CSV files."""

    model_config = ConfigDict(extra="forbid")

    snapshot_every: Annotated[int, Field(default=0, ge=0)]
    final_state: bool = True
    dump_matrix: bool = False


class SimulationConfig(BaseModel):
    """One simulation: physics, grid, time stepping and solver choices."""

    model_config = ConfigDict(extra="forbid")

    physics: PhysicalParams = Field(default_factory=PhysicalParams)
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    tau: Annotated[float, Field(default=2.5e-3, gt=0)]
    final_time: Annotated[float, Field(default=1.0, gt=0)]
    scheme: Scheme = "semi_implicit"
    ustar: UStar = "scheme_r"
    contact_floor: Annotated[float, Field(default=0.01, gt=0)]
    newton: NewtonSettings = Field(default_factory=NewtonSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)

    @model_validator(mode="after")
    def check_time_window(self) -> "SimulationConfig":
        """Require at least one step."""
        if self.final_time < self.tau * (1.0 - STEP_COUNT_TOL):
            raise ValueError(f"final_time {self.final_time} is shorter than tau {self.tau}")
        return self

    @property
    def n_steps(self) -> int:
        """Number of steps, ceil(T / tau)."""
        return math.ceil(self.final_time / self.tau - STEP_COUNT_TOL)


@dataclass(frozen=True)
class State:
    """Discrete solution after a step.

    ``displacement`` is the plate position after the step, i.e. the
    geometry of the next step; ``displacement_geom`` is the geometry this
    step was computed on. ``velocity`` is the full MINI vector whose top
    u2 dofs are the plate velocity.
    """

    t: float
    step: int
    velocity: np.ndarray
    pressure: np.ndarray
    displacement: np.ndarray
    curvature: np.ndarray
    displacement_geom: np.ndarray
    newton_iterations: int = 0


@dataclass
class PhaseTimes:
    """Wall-clock seconds per phase."""

    assembly: float = 0.0
    factorization: float = 0.0
    solve: float = 0.0
    diagnostics: float = 0.0
    output: float = 0.0

    def add(self, other: "PhaseTimes") -> None:
        """Accumulate ``other`` into this record."""
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    @property
    def total(self) -> float:
        """Sum over phases."""
        return self.assembly + self.factorization + self.solve + self.diagnostics + self.output


@dataclass(frozen=True)
class StepRecord:
    """Per-step diagnostics."""

    step: int
    t: float
    report: EnergyReport
    gcl: float
    min_height: float
    newton_iterations: int
    times: PhaseTimes


@dataclass
class Trajectory:
    """States and diagnostics of a run.

    States are kept at every ``keep_every``-th step and always at step 0 and
    the last step.
    """

    config: SimulationConfig
    disc: Discretization
    states: dict[int, State] = field(default_factory=dict)
    records: list[StepRecord] = field(default_factory=list)
    times: PhaseTimes = field(default_factory=PhaseTimes)
    wall_clock: float = 0.0
    keep_every: int = 1

    @property
    def final_state(self) -> State:
        """State after the last step."""
        return self.states[max(self.states)]

    @property
    def final_time(self) -> float:
        """Time of the last state."""
        return self.final_state.t

    def state_at(self, step: int) -> State:
        """Stored state at ``step``."""
        if step not in self.states:
            raise KeyError(f"step {step} was not kept (keep_every={self.keep_every})")
        return self.states[step]

    def sample_steps(self) -> list[int]:
        """Stored steps after the initial one."""
        return sorted(k for k in self.states if k > 0)

    @property
    def energy_reports(self) -> list[EnergyReport]:
        """Energy ledger of every step."""
        return [record.report for record in self.records]

    @property
    def average_newton_iterations(self) -> float:
        """Mean Newton iterations per step, 0 for the linear scheme."""
        counts = [r.newton_iterations for r in self.records]
        return float(np.mean(counts)) if counts else 0.0


@dataclass
class StepContext:
    """Objects reused by every step of one run."""

    disc: Discretization
    config: SimulationConfig
    orderings: OrderingCache = field(default_factory=OrderingCache)
    extension: DisplacementExtension | None = None
    times: PhaseTimes = field(default_factory=PhaseTimes)
    matrix_dump: str | None = None

    @classmethod
    def create(cls, disc: Discretization, config: SimulationConfig) -> "StepContext":
        """Context with a factorized displacement extension."""
        return cls(disc=disc, config=config, extension=DisplacementExtension(disc.mesh))


def _check_contact(displacement: np.ndarray, floor: float, step: int) -> float:
    height = 1.0 + float(np.min(displacement))
    if height <= floor:
        logging.error(f"[Step][{step}] plate height {height:.6g} reached the contact floor {floor}.")
        raise ContactError(height, floor, step)
    return height


def build_mesh_for(config: SimulationConfig, threads: int = 1) -> Discretization:
    """Discretization of the configured grid."""
    spec = config.mesh
    mesh = build_reference_mesh(config.physics.length, spec.nx, spec.ny)
    for _ in range(spec.refinements):
        mesh = refine_uniform(mesh)
    return build_discretization(mesh, spec.structure_bc, threads=threads)


def initial_state(
    disc: Discretization,
    config: SimulationConfig,
    displacement: Callable[[np.ndarray], np.ndarray] | None = None,
    velocity: Callable[[np.ndarray], np.ndarray] | None = None,
) -> State:
    """State at t = 0.

    The plate displacement is the Riesz projection of ``displacement``, the
    velocity is interpolated, and the first geometry is advanced by
    tau xi^0.

    Args:
        disc (Discretization): Mesh data.
        config (SimulationConfig): Run configuration.
        displacement (Callable | None): Initial shifted displacement d(x1).
        velocity (Callable | None): Initial velocity u(x) for points (n, 2).

    Returns:
        The initial state.
    """
    layout = disc.layout
    d0 = np.zeros(layout.n_trace)
    if displacement is not None:
        d0 = riesz_project(displacement, disc.surface).values
        if layout.structure_bc == "clamped":
            d0 = d0 - d0[0]
    u0 = np.zeros(layout.n_velocity)
    if velocity is not None:
        u0 = project_initial_velocity(velocity, disc.mesh, layout)
    d1 = d0 + config.tau * layout.trace_velocity(u0)
    _check_contact(d1, config.contact_floor, 0)
    return State(
        t=0.0,
        step=0,
        velocity=u0,
        pressure=np.zeros(layout.n_pressure),
        displacement=d1,
        curvature=initial_curvature(disc, d1),
        displacement_geom=d0,
    )


def step_semi_implicit(state: State, ctx: StepContext) -> State:
    """One linear step: solve for (u, p, z), then move the plate by tau u2.

    Args:
        state (State): State at step k - 1.
        ctx (StepContext): Run context.

    Returns:
        State at step k.
    """
    config, disc = ctx.config, ctx.disc
    step = state.step + 1
    tau = config.tau
    _check_contact(state.displacement, config.contact_floor, step)

    start = time.perf_counter()
    system = assemble_semi_implicit(disc, state, config.physics, tau, config.ustar)
    ctx.times.assembly += time.perf_counter() - start
    if ctx.matrix_dump is not None:
        dump_matrix_market(system.matrix, ctx.matrix_dump)
        ctx.matrix_dump = None

    start = time.perf_counter()
    factor = factorize(system.matrix, ctx.orderings)
    ctx.times.factorization += time.perf_counter() - start
    start = time.perf_counter()
    fields = system.expand(solve(factor, system.rhs))
    ctx.times.solve += time.perf_counter() - start

    velocity = fields["velocity"]
    displacement = state.displacement + tau * disc.layout.trace_velocity(velocity)
    min_height = _check_contact(displacement, config.contact_floor, step)
    if ctx.extension is not None:
        start = time.perf_counter()
        extended = ctx.extension.extend(displacement)
        ctx.times.solve += time.perf_counter() - start
        logging.debug(f"[Step][{step}] extension residual {np.max(np.abs(ctx.extension.residual(extended.values))):.3e}.")
    logging.debug(f"[Step][{step}] t={state.t + tau:.6f}, min height {min_height:.6f}.")
    return State(
        t=state.t + tau,
        step=step,
        velocity=velocity,
        pressure=fields["pressure"],
        displacement=displacement,
        curvature=fields["curvature"],
        displacement_geom=state.displacement,
    )


def step_fully_implicit(state: State, ctx: StepContext) -> State:
    """One Newton-solved nonlinear step.

    At least one Newton update is taken; iteration stops when the residual
    infinity norm is below the absolute tolerance or has dropped by the
    relative tolerance.

    Args:
        state (State): State at step k - 1.
        ctx (StepContext): Run context.

    Returns:
        State at step k with its iteration count.
    """
    config, disc = ctx.config, ctx.disc
    newton = config.newton
    layout = disc.layout
    step = state.step + 1
    tau = config.tau
    _check_contact(state.displacement, config.contact_floor, step)

    if newton.predictor:
        guess = step_semi_implicit(state, ctx)
    else:
        guess = replace(state, t=state.t + tau, step=step, displacement_geom=state.displacement)

    start = time.perf_counter()
    residual = assemble_fully_implicit_residual(disc, guess, state, config.physics, tau)
    ctx.times.assembly += time.perf_counter() - start
    history = [residual.norm]
    iterations = 0
    while True:
        iterations += 1
        start = time.perf_counter()
        jacobian = assemble_fully_implicit_jacobian(disc, guess, state, config.physics, tau, newton.jacobian)
        ctx.times.assembly += time.perf_counter() - start
        start = time.perf_counter()
        factor = factorize(jacobian, ctx.orderings)
        ctx.times.factorization += time.perf_counter() - start
        start = time.perf_counter()
        delta = solve(factor, -residual.vector)
        ctx.times.solve += time.perf_counter() - start

        x = pack_newton(layout, guess.velocity, guess.pressure, guess.curvature, guess.displacement) + delta
        fields = unpack_newton(layout, x)
        guess = replace(
            guess,
            velocity=fields["velocity"],
            pressure=fields["pressure"],
            curvature=fields["curvature"],
            displacement=fields["displacement"],
        )
        _check_contact(guess.displacement, config.contact_floor, step)
        start = time.perf_counter()
        residual = assemble_fully_implicit_residual(disc, guess, state, config.physics, tau)
        ctx.times.assembly += time.perf_counter() - start
        history.append(residual.norm)
        logging.debug(f"[Newton][{step}] iteration {iterations}: |R| = {residual.norm:.3e}.")
        if residual.norm <= newton.abs_tol or residual.norm <= newton.rel_tol * history[0]:
            break
        if iterations >= newton.max_iterations:
            logging.error(f"[Newton][{step}] no convergence, residual history {history}.")
            raise ConvergenceError(history, step)

    if ctx.extension is not None:
        ctx.extension.extend(guess.displacement)
    return replace(guess, newton_iterations=iterations)


def write_snapshot(disc: Discretization, state: State, extension: DisplacementExtension, path: str) -> None:
    """Write velocity, pressure, displacement and deformed coordinates as VTK."""
    layout = disc.layout
    off = layout.velocity_offsets()
    field_ext = extension.extend(state.displacement)
    disc.mesh.write_vtk(
        path,
        point_data={
            "velocity": np.column_stack([state.velocity[off["u1_vertex"]], state.velocity[off["u2_vertex"]]]),
            "pressure": state.pressure,
            "displacement": field_ext.values,
            "deformed": deformed_vertices(disc.mesh, field_ext),
        },
    )


def run(
    config: SimulationConfig,
    threads: int = 1,
    out_dir: str | None = None,
    keep_every: int = 1,
    disc: Discretization | None = None,
) -> Trajectory:
    """March from t = 0 to the final time.

    Args:
        config (SimulationConfig): Run configuration.
        threads (int): Element assembly threads.
        out_dir (str | None): Directory for snapshots and matrix dumps.
        keep_every (int): Keep every n-th state in the trajectory.
        disc (Discretization | None): Reuse an existing discretization.

    Returns:
        The trajectory.
    """
    wall_start = time.perf_counter()
    disc = disc or build_mesh_for(config, threads)
    ctx = StepContext.create(disc, config)
    if out_dir is not None and config.output.dump_matrix:
        ctx.matrix_dump = os.path.join(out_dir, "step1_matrix.mtx")
    step_fn = step_semi_implicit if config.scheme == "semi_implicit" else step_fully_implicit
    n_steps = config.n_steps
    logging.info(
        f"[Step] {config.scheme} run: {disc.mesh.nx}x{disc.mesh.ny} mesh, tau={config.tau}, "
        f"{n_steps} steps, step-1 size {disc.layout.step1_size} ({disc.layout.unreduced_step1_size} before elimination).",
    )

    state = initial_state(disc, config)
    traj = Trajectory(config=config, disc=disc, keep_every=keep_every)
    traj.states[0] = state
    snapshot_every = config.output.snapshot_every if out_dir is not None else 0
    if snapshot_every:
        write_snapshot(disc, state, ctx.extension, os.path.join(out_dir, "snapshot_00000.vtk"))

    for _ in range(n_steps):
        before = PhaseTimes(**vars(ctx.times))
        new_state = step_fn(state, ctx)

        start = time.perf_counter()
        report = energy_ledger(disc, state, new_state, config.physics, config.tau)
        gcl = gcl_residual(disc, new_state)
        ctx.times.diagnostics += time.perf_counter() - start
        if snapshot_every and new_state.step % snapshot_every == 0:
            start = time.perf_counter()
            write_snapshot(disc, new_state, ctx.extension, os.path.join(out_dir, f"snapshot_{new_state.step:05d}.vtk"))
            ctx.times.output += time.perf_counter() - start

        step_times = PhaseTimes(**{k: getattr(ctx.times, k) - getattr(before, k) for k in vars(before)})
        traj.records.append(
            StepRecord(
                step=new_state.step,
                t=new_state.t,
                report=report,
                gcl=gcl,
                min_height=1.0 + float(np.min(new_state.displacement)),
                newton_iterations=new_state.newton_iterations,
                times=step_times,
            ),
        )
        if new_state.step % keep_every == 0 or new_state.step == n_steps:
            traj.states[new_state.step] = new_state
        state = new_state

    traj.times = ctx.times
    traj.wall_clock = time.perf_counter() - wall_start
    final = traj.records[-1] if traj.records else None
    if final is not None:
        logging.info(
            f"[Step] finished at t={final.t:.4f}: energy {final.report.energy:.6e}, "
            f"min height {min(r.min_height for r in traj.records):.6f}, wall-clock {traj.wall_clock:.2f}s.",
        )
    return traj
