"""Energy ledger, volume conservation, error norms and convergence rates."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

from libraries.assembly import Discretization, PhysicalParams, load_vector
from libraries.errors import DataError, StructuralError
from libraries.geometry import trace_at, trace_on_elements
from libraries.mesh import is_nested
from libraries.operators import segment_quadrature
from libraries.spaces import affine_maps, reference_basis

if TYPE_CHECKING:
    from libraries.stepper import State, Trajectory

Axis = Literal["h", "tau"]

ERROR_COLUMNS = ("uLiL2", "xiLiL2", "etaLiL2", "gradetaLiL2", "LapetaLiL2", "graduL2L2")
ENERGY_COLUMNS = (
    "step",
    "t",
    "energy",
    "fluid_kinetic",
    "structure_kinetic",
    "elastic",
    "bending",
    "viscous_dissipation",
    "damping_dissipation",
    "numerical_dissipation",
    "external_work",
    "identity_residual",
    "relative_residual",
)
COMPARE_COLUMNS = (
    "tau",
    "scheme",
    *ERROR_COLUMNS,
    "newton_avg",
    "t_assembly",
    "t_factorization",
    "t_solve",
    "wall_clock",
)
TIME_MATCH_TOL = 1e-9
REFERENCE_MATCH_RTOL = 1e-9


# ==================== Energy ====================
@dataclass(frozen=True)
class EnergyReport:
    """Energy of one state and, when a previous state is known, its ledger.

    Dissipation and work terms are per unit time; the ledger residual is
    E^k - E^{k-1} + tau (viscous + damping + numerical - work).
    """

    step: int
    t: float
    fluid_kinetic: float
    structure_kinetic: float
    elastic: float
    bending: float
    viscous_dissipation: float = 0.0
    damping_dissipation: float = 0.0
    numerical_dissipation: float = 0.0
    external_work: float = 0.0
    identity_residual: float = 0.0

    @property
    def energy(self) -> float:
        """Total discrete energy."""
        return self.fluid_kinetic + self.structure_kinetic + self.elastic + self.bending

    @property
    def relative_residual(self) -> float:
        """Ledger residual scaled by max(E, 1)."""
        return abs(self.identity_residual) / max(self.energy, 1.0)

    def row(self) -> dict[str, float]:
        """CSV row keyed by :data:`ENERGY_COLUMNS`."""
        values = asdict(self)
        values["energy"] = self.energy
        values["relative_residual"] = self.relative_residual
        return {name: values[name] for name in ENERGY_COLUMNS}


def _heights(disc: Discretization, displacement: np.ndarray) -> np.ndarray:
    d, _ = trace_on_elements(disc.tables, displacement)
    return 1.0 + d


def energy(disc: Discretization, state: "State", params: PhysicalParams) -> EnergyReport:
    """Energy of a state, evaluated with the assembly quadrature.

    The fluid term is weighted by the height the state's velocity was
    computed on (``state.displacement_geom``).

    Args:
        disc (Discretization): Mesh data.
        state (State): The state.
        params (PhysicalParams): Material coefficients.

    Returns:
        Report without ledger terms.
    """
    W = disc.tables.weights
    U = disc.velocity_at_points(state.velocity)
    H = _heights(disc, state.displacement_geom)
    xi = disc.layout.trace_velocity(state.velocity)
    Ms, Ks = disc.trace_mass, disc.trace_stiffness
    return EnergyReport(
        step=state.step,
        t=state.t,
        fluid_kinetic=0.5 * params.rho_f * float(np.sum(W * H * np.sum(U**2, axis=-1))),
        structure_kinetic=0.5 * params.rho_s * float(xi @ (Ms @ xi)),
        elastic=0.5 * params.gamma1 * float(state.displacement @ (Ks @ state.displacement)),
        bending=0.5 * params.gamma2 * float(state.curvature @ (Ms @ state.curvature)),
    )


def viscous_dissipation(disc: Discretization, state: "State", params: PhysicalParams) -> float:
    """2 mu int J |sym(grad u F^-1)|^2 on the geometry the state was computed on."""
    tables = disc.tables
    d, slope = trace_on_elements(tables, state.displacement_geom)
    H = 1.0 + d
    N = np.zeros(H.shape + (2, 2))
    N[..., 0, 0] = H
    N[..., 1, 0] = -tables.x2 * slope
    N[..., 1, 1] = 1.0
    GU = np.einsum("eca,eqak->eqck", disc.element_velocity(state.velocity), tables.grads)
    A = np.einsum("eqck,eqkl->eqcl", GU, N)
    S = 0.5 * (A + A.swapaxes(-1, -2))
    return 2.0 * params.mu * float(np.sum(tables.weights / H * np.sum(S**2, axis=(-1, -2))))


def energy_ledger(
    disc: Discretization,
    previous: "State",
    current: "State",
    params: PhysicalParams,
    tau: float,
) -> EnergyReport:
    """Energy of ``current`` with the balance against ``previous``.

    Args:
        disc (Discretization): Mesh data.
        previous (State): State at step k - 1.
        current (State): State at step k.
        params (PhysicalParams): Material coefficients and load.
        tau (float): Time step.

    Returns:
        The full report.
    """
    report_old = energy(disc, previous, params)
    report = energy(disc, current, params)
    layout = disc.layout
    Ms, Ks = disc.trace_mass, disc.trace_stiffness
    W = disc.tables.weights

    xi = layout.trace_velocity(current.velocity)
    xi_old = layout.trace_velocity(previous.velocity)
    du = disc.velocity_at_points(current.velocity - previous.velocity) / tau
    dxi = (xi - xi_old) / tau
    dz = (current.curvature - previous.curvature) / tau
    H_old = _heights(disc, previous.displacement_geom)
    numerical = (
        0.5 * params.rho_f * tau * float(np.sum(W * H_old * np.sum(du**2, axis=-1)))
        + 0.5 * params.rho_s * tau * float(dxi @ (Ms @ dxi))
        + 0.5 * params.gamma1 * tau * float(xi @ (Ks @ xi))
        + 0.5 * params.gamma2 * tau * float(dz @ (Ms @ dz))
    )
    viscous = viscous_dissipation(disc, current, params)
    damping = params.gamma3 * float(xi @ (Ks @ xi))
    work = float(load_vector(disc.surface, params.forcing, current.t) @ xi)
    residual = report.energy - report_old.energy + tau * (viscous + damping + numerical - work)
    return EnergyReport(
        step=report.step,
        t=report.t,
        fluid_kinetic=report.fluid_kinetic,
        structure_kinetic=report.structure_kinetic,
        elastic=report.elastic,
        bending=report.bending,
        viscous_dissipation=viscous,
        damping_dissipation=damping,
        numerical_dissipation=numerical,
        external_work=work,
        identity_residual=residual,
    )


def gcl_residual(disc: Discretization, state: "State") -> float:
    """Volume change rate int_Sigma xi dx1 of the plate velocity."""
    xi = disc.layout.trace_velocity(state.velocity)
    return float(np.asarray(disc.trace_mass.sum(axis=0)).ravel() @ xi)


# ==================== Errors ====================
@dataclass(frozen=True)
class ErrorRow:
    """The six error norms of one ladder level against the reference."""

    h: float
    tau: float
    uLiL2: float  # noqa: N815
    xiLiL2: float  # noqa: N815
    etaLiL2: float  # noqa: N815
    gradetaLiL2: float  # noqa: N815
    LapetaLiL2: float  # noqa: N815
    graduL2L2: float  # noqa: N815


@dataclass
class ErrorTable:
    """Error rows of a ladder and the fitted slope of every column."""

    axis: Axis
    rows: list[ErrorRow] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)
    reference: float | None = None

    def fit(self) -> dict[str, float]:
        """Fit every column against h or tau, leaving out the reference level."""
        params = [getattr(row, self.axis) for row in self.rows]
        self.slopes = {
            name: fit_rate(params, [getattr(row, name) for row in self.rows], self.reference) for name in ERROR_COLUMNS
        }
        return self.slopes


def _prolongation(coarse: Discretization, fine: Discretization) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coarse triangle, basis values and physical gradients at every fine quadrature point."""
    points = fine.tables.points.reshape(-1, 2)
    tri, bary = coarse.mesh.locate_points(points)
    values, ref_grads = reference_basis(bary)
    _, inv, _ = affine_maps(coarse.mesh.triangle_coords)
    grads = np.einsum("nak,nkj->naj", ref_grads, inv[tri])
    return tri, values, grads


def _time_ratio(coarse_tau: float, fine_tau: float) -> int:
    ratio = coarse_tau / fine_tau
    if ratio < 1.0 - TIME_MATCH_TOL or abs(ratio - round(ratio)) > TIME_MATCH_TOL * ratio:
        raise StructuralError(f"time step {coarse_tau} is not a multiple of the reference step {fine_tau}")
    return int(round(ratio))


def error_norms(traj: "Trajectory", ref_traj: "Trajectory") -> ErrorRow:
    """Errors of a trajectory against a finer reference on nested grids.

    L-infinity-in-time norms maximize over the coarse sample times kτ;
    the gradient norm is the tau-weighted sum over the same times.

    Args:
        traj (Trajectory): Coarse trajectory.
        ref_traj (Trajectory): Reference trajectory.

    Returns:
        The six norms.
    """
    coarse, fine = traj.disc, ref_traj.disc
    if not is_nested(coarse.mesh, fine.mesh):
        raise StructuralError(
            f"{coarse.mesh.nx}x{coarse.mesh.ny} mesh is not nested in {fine.mesh.nx}x{fine.mesh.ny}",
        )
    tau = traj.config.tau
    ratio = _time_ratio(tau, ref_traj.config.tau)
    if not math.isclose(traj.final_time, ref_traj.final_time, rel_tol=TIME_MATCH_TOL):
        raise StructuralError(f"final times differ: {traj.final_time} vs {ref_traj.final_time}")

    tri, values, grads = _prolongation(coarse, fine)
    W = fine.tables.weights.reshape(-1)
    x, w = segment_quadrature(fine.surface)
    ws = np.asarray(w)

    def trace_error(coarse_values: np.ndarray, fine_values: np.ndarray) -> tuple[float, float]:
        vc, sc = trace_at(coarse.surface, coarse_values, x)
        vf, sf = trace_at(fine.surface, fine_values, x)
        return float(np.sum(ws * (vc - vf) ** 2)), float(np.sum(ws * (sc - sf) ** 2))

    maxima = dict.fromkeys(ERROR_COLUMNS[:5], 0.0)
    grad_sum = 0.0
    for k in traj.sample_steps():
        sc, sf = traj.state_at(k), ref_traj.state_at(k * ratio)
        coeffs = coarse.element_velocity(sc.velocity)[tri]
        u_c = np.einsum("na,nca->nc", values, coeffs)
        du_c = np.einsum("naj,nca->ncj", grads, coeffs)
        u_f = fine.velocity_at_points(sf.velocity).reshape(-1, 2)
        du_f = np.einsum("eca,eqaj->eqcj", fine.element_velocity(sf.velocity), fine.tables.grads).reshape(-1, 2, 2)
        u_err = float(np.sum(W * np.sum((u_c - u_f) ** 2, axis=-1)))
        grad_sum += tau * float(np.sum(W * np.sum((du_c - du_f) ** 2, axis=(-1, -2))))

        xi_err, _ = trace_error(coarse.layout.trace_velocity(sc.velocity), fine.layout.trace_velocity(sf.velocity))
        eta_err, slope_err = trace_error(sc.displacement, sf.displacement)
        z_err, _ = trace_error(sc.curvature, sf.curvature)
        for name, value in zip(ERROR_COLUMNS[:5], (u_err, xi_err, eta_err, slope_err, z_err), strict=True):
            maxima[name] = max(maxima[name], value)

    row = ErrorRow(
        h=coarse.mesh.h,
        tau=tau,
        **{name: math.sqrt(value) for name, value in maxima.items()},
        graduL2L2=math.sqrt(grad_sum),
    )
    logging.info(
        f"[Convergence] h={row.h:.3e} tau={row.tau:.3e}: "
        + ", ".join(f"{name}={getattr(row, name):.3e}" for name in ERROR_COLUMNS),
    )
    return row


def velocity_difference_l2l2(traj: "Trajectory", other: "Trajectory") -> float:
    """sqrt(sum_k tau ||u_a^k - u_b^k||^2) for two runs on the same mesh and time grid."""
    if traj.disc.mesh.nx != other.disc.mesh.nx or traj.disc.mesh.ny != other.disc.mesh.ny:
        raise StructuralError("velocity difference needs identical meshes")
    if _time_ratio(traj.config.tau, other.config.tau) != 1:
        raise StructuralError("velocity difference needs identical time steps")
    W = traj.disc.tables.weights
    total = 0.0
    for k in traj.sample_steps():
        diff = traj.disc.velocity_at_points(traj.state_at(k).velocity - other.state_at(k).velocity)
        total += traj.config.tau * float(np.sum(W * np.sum(diff**2, axis=-1)))
    return math.sqrt(total)


def fit_rate(
    params: list[float] | np.ndarray,
    errors: list[float] | np.ndarray,
    reference: float | None = None,
) -> float:
    """Least-squares slope of log(error) against log(parameter).

    Args:
        params (list[float] | np.ndarray): Mesh sizes or time steps.
        errors (list[float] | np.ndarray): Errors, all positive.
        reference (float | None): Parameter of the reference solution; a level
            at that parameter is left out of the fit.

    Returns:
        The slope.
    """
    params = np.asarray(params, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if params.size == errors.size and reference is not None:
        keep = ~np.isclose(params, reference, rtol=REFERENCE_MATCH_RTOL, atol=0.0)
        params, errors = params[keep], errors[keep]
    if params.size < 3 or params.size != errors.size:
        raise DataError(f"rate fit needs at least 3 matching points, got {params.size} and {errors.size}")
    if np.any(params <= 0) or np.any(errors <= 0):
        raise DataError("rate fit needs positive parameters and errors")
    slope, _ = np.polyfit(np.log(params), np.log(errors), 1)
    return float(slope)


# ==================== CSV ====================
def write_error_csv(table: ErrorTable, path: str) -> None:
    """Write the error table, one row per level plus a closing ``slope`` row."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["h", "tau", *ERROR_COLUMNS])
        for row in table.rows:
            writer.writerow([f"{row.h:.6e}", f"{row.tau:.6e}", *(f"{getattr(row, c):.6e}" for c in ERROR_COLUMNS)])
        if table.slopes:
            writer.writerow(["slope", table.axis, *(f"{table.slopes[c]:.4f}" for c in ERROR_COLUMNS)])
    logging.info(f"[Convergence] wrote {path}.")


def write_energy_csv(reports: list[EnergyReport], path: str) -> None:
    """Write the per-step energy history."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(ENERGY_COLUMNS))
        writer.writeheader()
        for report in reports:
            writer.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in report.row().items()})
    logging.info(f"[Energy] wrote {path}.")


def write_gcl_csv(records: list[tuple[int, float, float]], path: str) -> None:
    """Write (step, t, int xi) rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "t", "gcl_residual"])
        for step, t, value in records:
            writer.writerow([step, f"{t:.12e}", f"{value:.6e}"])


def write_compare_csv(rows: list[dict[str, float | str]], path: str) -> None:
    """Write one row per (tau, scheme) keyed by :data:`COMPARE_COLUMNS`."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(COMPARE_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6e}" if isinstance(v, float) else v) for k, v in row.items()})
    logging.info(f"[Compare] wrote {path}.")


def write_agreement_csv(taus: list[float], differences: list[float], slope: float | None, path: str) -> None:
    """Write the semi/fully implicit velocity difference per tau and its slope."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["tau", "uDiffL2L2"])
        for tau, value in zip(taus, differences, strict=True):
            writer.writerow([f"{tau:.6e}", f"{value:.6e}"])
        if slope is not None:
            writer.writerow(["slope", f"{slope:.4f}"])
    logging.info(f"[Compare] wrote {path}.")
