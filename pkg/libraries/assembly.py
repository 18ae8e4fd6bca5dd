"""Global systems of the coupled fluid-plate problem on the reference domain.

Velocity dofs of an element are ordered ``(component, local basis)`` with
the local basis being the three vertex hats followed by the bubble. All
element quantities are vectorized over elements and quadrature points;
element chunks can be evaluated on a thread pool and are always
concatenated in chunk order, so assembled matrices do not depend on the
thread count.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import spsolve

from libraries.errors import DataError, DimensionError
from libraries.geometry import GeometryCache, build_geometry
from libraries.mesh import Mesh, SurfaceMesh
from libraries.operators import segment_quadrature, surface_mass, surface_stiffness
from libraries.quadrature import QuadratureRule, quadrature_rule
from libraries.spaces import DofLayout, ElementTables, StructureBC, build_layout, tabulate_elements

if TYPE_CHECKING:
    from libraries.stepper import State

__all__ = [
    "Discretization",
    "ForcingSpec",
    "FullyImplicitResidual",
    "LinearSystem",
    "PhysicalParams",
    "QuadratureRule",
    "assemble_fluid_operators",
    "assemble_fully_implicit_jacobian",
    "assemble_fully_implicit_residual",
    "assemble_semi_implicit",
    "build_discretization",
    "load_vector",
    "quadrature_rule",
]

UStar = Literal["scheme_r", "appendix"]
JacobianMode = Literal["analytic", "finite_difference"]

ASSEMBLY_DEGREE = 6
CHUNK_SIZE = 2048
SWITCH_OFF_TOL = 1e-12


class ForcingSpec(BaseModel):
    """Vertical load on the plate, g(t, x1) = A t sin(2 pi k x1) up to the switch-off time."""

    model_config = ConfigDict(extra="forbid")

    amplitude: float = 200.0
    frequency: float = 1.0
    switch_off: float = 0.2

    def load(self, t: float, x1: np.ndarray) -> np.ndarray:
        """Evaluate the load at time ``t``; positive values push the plate towards +x2."""
        x1 = np.asarray(x1, dtype=float)
        if t > self.switch_off + SWITCH_OFF_TOL:
            return np.zeros_like(x1)
        return self.amplitude * t * np.sin(2.0 * math.pi * self.frequency * x1)


class PhysicalParams(BaseModel):
    """Material coefficients of the fluid and the plate."""

    model_config = ConfigDict(extra="forbid")

    rho_f: float = Field(default=1.0, gt=0)
    rho_s: float = Field(default=1.0, gt=0)
    mu: float = Field(default=0.1, gt=0)
    gamma1: float = Field(default=0.1, gt=0)
    gamma2: float = Field(default=0.1, gt=0)
    gamma3: float = Field(default=0.0, ge=0)
    length: float = Field(default=2.0, gt=0)
    forcing: ForcingSpec = Field(default_factory=ForcingSpec)


@dataclass(frozen=True)
class Discretization:
    """Everything about one mesh that does not change in time."""

    mesh: Mesh
    layout: DofLayout
    surface: SurfaceMesh
    rule: QuadratureRule
    tables: ElementTables
    trace_mass: sp.csr_matrix
    trace_stiffness: sp.csr_matrix
    threads: int = 1

    @property
    def n_elements(self) -> int:
        """Number of triangles."""
        return self.mesh.n_triangles

    def trace_embedding(self) -> sp.csr_matrix:
        """Selection matrix E with E[top u2 dof of node i, i] = 1."""
        layout = self.layout
        return sp.csr_matrix(
            (np.ones(layout.n_trace), (layout.top_u2_dofs, np.arange(layout.n_trace))),
            shape=(layout.n_velocity, layout.n_trace),
        )

    def element_velocity(self, velocity: np.ndarray) -> np.ndarray:
        """Velocity coefficients per element, shape (n_t, 2, 4)."""
        return velocity[self.layout.element_velocity_dofs].reshape(self.n_elements, 2, 4)

    def velocity_at_points(self, velocity: np.ndarray) -> np.ndarray:
        """Velocity at every quadrature point, shape (n_t, n_q, 2)."""
        return np.einsum("qa,eca->eqc", self.tables.phi, self.element_velocity(velocity))


def build_discretization(
    mesh: Mesh,
    structure_bc: StructureBC = "periodic",
    degree: int = ASSEMBLY_DEGREE,
    threads: int = 1,
) -> Discretization:
    """Set up layout, quadrature tables and trace matrices for a mesh.

    Args:
        mesh (Mesh): Reference mesh.
        structure_bc (StructureBC): Trace space variant.
        degree (int): Quadrature degree of every volume term.
        threads (int): Worker threads for element assembly.

    Returns:
        The discretization.
    """
    layout = build_layout(mesh, structure_bc)
    surface = mesh.surface()
    rule = quadrature_rule(degree)
    return Discretization(
        mesh=mesh,
        layout=layout,
        surface=surface,
        rule=rule,
        tables=tabulate_elements(mesh, rule),
        trace_mass=surface_mass(surface),
        trace_stiffness=surface_stiffness(surface),
        threads=threads,
    )


@dataclass(frozen=True)
class LinearSystem:
    """Reduced sparse system over the free unknowns.

    ``free`` maps reduced positions into the unreduced unknown vector, whose
    groups are located by ``full_blocks``; ``blocks`` gives the reduced
    slice of every group.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    layout: DofLayout
    free: np.ndarray
    blocks: dict[str, slice]
    full_blocks: dict[str, slice]

    @property
    def size(self) -> int:
        """Number of reduced unknowns."""
        return self.matrix.shape[0]

    def expand(self, solution: np.ndarray) -> dict[str, np.ndarray]:
        """Scatter a reduced solution into unreduced groups, zeros on constrained unknowns."""
        if solution.shape != (self.size,):
            raise DimensionError(f"solution has shape {solution.shape}, system size is {self.size}")
        total = max(s.stop for s in self.full_blocks.values())
        full = np.zeros(total)
        full[self.free] = solution
        return {name: full[s].copy() for name, s in self.full_blocks.items()}


@dataclass(frozen=True)
class FluidOperators:
    """Fluid blocks on the full velocity space for one geometry.

    ``mass`` is weighted by the height, ``mass_rate`` by the height rate,
    ``convection`` is the skew pair without its 1/2 rho_f factor,
    ``viscous`` includes mu and ``divergence`` maps velocity to pressure rows.
    """

    mass: sp.csr_matrix
    mass_rate: sp.csr_matrix
    convection: sp.csr_matrix
    viscous: sp.csr_matrix
    divergence: sp.csr_matrix


def _chunks(n: int) -> list[slice]:
    return [slice(start, min(start + CHUNK_SIZE, n)) for start in range(0, n, CHUNK_SIZE)]


def _map_chunks(fn: Callable[[slice], dict], n: int, threads: int) -> list[dict]:
    slices = _chunks(n)
    if threads <= 1 or len(slices) == 1:
        return [fn(sl) for sl in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, slices))


def _triplets(rows: np.ndarray, cols: np.ndarray, local: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    local = local.reshape(rows.shape[0], rows.shape[1], cols.shape[1])
    r = np.broadcast_to(rows[:, :, None], local.shape)
    c = np.broadcast_to(cols[:, None, :], local.shape)
    return r.ravel(), c.ravel(), local.ravel()


def _gather(results: list[dict], key: str, shape: tuple[int, int]) -> sp.csr_matrix:
    rows = np.concatenate([r[key][0] for r in results])
    cols = np.concatenate([r[key][1] for r in results])
    vals = np.concatenate([r[key][2] for r in results])
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def _gather_vector(results: list[dict], key: str, size: int) -> np.ndarray:
    rows = np.concatenate([r[key][0] for r in results])
    vals = np.concatenate([r[key][1] for r in results])
    return np.bincount(rows, weights=vals, minlength=size)


def _vector_block(scalar: np.ndarray) -> np.ndarray:
    """Lift a scalar (e, b, a) block to the (e, d, b, c, a) vector block with delta_cd."""
    out = np.zeros((scalar.shape[0], 2, 4, 2, 4))
    out[:, 0, :, 0, :] = scalar
    out[:, 1, :, 1, :] = scalar
    return out


def _cofactor_gradients(grads: np.ndarray, N: np.ndarray) -> np.ndarray:
    return np.einsum("eqak,eqkl->eqal", grads, N)


def assemble_velocity_mass(disc: Discretization, weight: np.ndarray) -> sp.csr_matrix:
    """Vector mass matrix int weight u . phi over the reference domain.

    Args:
        disc (Discretization): Mesh data.
        weight (np.ndarray): Weight at the quadrature points, shape (n_t, n_q).

    Returns:
        The matrix on the full velocity space.
    """
    tables = disc.tables
    rows = disc.layout.element_velocity_dofs

    def kernel(sl: slice) -> dict:
        local = _vector_block(np.einsum("eq,qa,qb->eba", tables.weights[sl] * weight[sl], tables.phi, tables.phi))
        return {"mass": _triplets(rows[sl], rows[sl], local)}

    n = disc.layout.n_velocity
    return _gather(_map_chunks(kernel, disc.n_elements, disc.threads), "mass", (n, n))


def assemble_fluid_operators(
    disc: Discretization,
    geometry: GeometryCache,
    advection: np.ndarray,
    mu: float,
) -> FluidOperators:
    """Assemble the fluid blocks on the geometry of one step.

    Args:
        disc (Discretization): Mesh data.
        geometry (GeometryCache): Geometry of the step.
        advection (np.ndarray): Transport velocity relative to the mesh at
            the quadrature points, shape (n_t, n_q, 2).
        mu (float): Viscosity.

    Returns:
        The operators.
    """
    tables = disc.tables
    phi = tables.phi
    psi = phi[:, :3]
    N = geometry.N
    vel_dofs = disc.layout.element_velocity_dofs
    pres_dofs = disc.layout.tri_vertex_dofs

    def kernel(sl: slice) -> dict:
        W = tables.weights[sl]
        H = geometry.height[sl]
        GN = _cofactor_gradients(tables.grads[sl], N[sl])
        mass = _vector_block(np.einsum("eq,qa,qb->eba", W * H, phi, phi))
        mass_rate = _vector_block(np.einsum("eq,qa,qb->eba", W * geometry.rate[sl], phi, phi))
        gv = np.einsum("eqal,eql->eqa", GN, advection[sl])
        skew = np.einsum("eq,eqa,qb->eba", W, gv, phi)
        convection = _vector_block(skew - skew.transpose(0, 2, 1))
        viscous = mu * (
            _vector_block(np.einsum("eq,eqal,eqbl->eba", W / H, GN, GN))
            + np.einsum("eq,eqad,eqbc->edbca", W / H, GN, GN)
        )
        divergence = np.einsum("eq,qk,eqac->ekca", W, psi, GN)
        rows, prow = vel_dofs[sl], pres_dofs[sl]
        return {
            "mass": _triplets(rows, rows, mass),
            "mass_rate": _triplets(rows, rows, mass_rate),
            "convection": _triplets(rows, rows, convection),
            "viscous": _triplets(rows, rows, viscous),
            "divergence": _triplets(prow, rows, divergence),
        }

    results = _map_chunks(kernel, disc.n_elements, disc.threads)
    nv, npres = disc.layout.n_velocity, disc.layout.n_pressure
    return FluidOperators(
        mass=_gather(results, "mass", (nv, nv)),
        mass_rate=_gather(results, "mass_rate", (nv, nv)),
        convection=_gather(results, "convection", (nv, nv)),
        viscous=_gather(results, "viscous", (nv, nv)),
        divergence=_gather(results, "divergence", (npres, nv)),
    )


def load_vector(surface: SurfaceMesh, forcing: ForcingSpec, t: float) -> np.ndarray:
    """Load int g(t) psi_i over Sigma for every trace hat psi_i."""
    x, w = segment_quadrature(surface)
    t_local = (x - surface.coordinates[:, None]) / surface.dx
    g = forcing.load(t, x) * w
    seg = surface.segments
    out = np.zeros(surface.n_nodes)
    np.add.at(out, seg[:, 0], np.sum(g * (1.0 - t_local), axis=1))
    np.add.at(out, seg[:, 1], np.sum(g * t_local, axis=1))
    return out


def _check_finite(*arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise DataError("non-finite values in the state")


def _semi_blocks(layout: DofLayout) -> tuple[np.ndarray, dict[str, slice], dict[str, slice]]:
    nv, npres, ntr = layout.n_velocity, layout.n_pressure, layout.n_trace
    free = np.concatenate([layout.free_velocity, nv + np.arange(npres), nv + npres + layout.free_trace])
    nfv = layout.n_free_velocity
    blocks = {
        "velocity": slice(0, nfv),
        "pressure": slice(nfv, nfv + npres),
        "curvature": slice(nfv + npres, nfv + npres + layout.n_free_trace),
    }
    full_blocks = {
        "velocity": slice(0, nv),
        "pressure": slice(nv, nv + npres),
        "curvature": slice(nv + npres, nv + npres + ntr),
    }
    return free, blocks, full_blocks


USTAR_COEFFICIENTS: dict[str, tuple[float, float]] = {
    # (matrix coefficient, right-hand-side coefficient) of rho_f J-dot mass
    "scheme_r": (-0.5, -1.0),
    "appendix": (1.0, 0.5),
}


def assemble_semi_implicit(
    disc: Discretization,
    state: "State",
    params: PhysicalParams,
    tau: float,
    ustar: UStar = "scheme_r",
    advecting: np.ndarray | None = None,
) -> LinearSystem:
    """Assemble the linear step for (u^k, p^k, z) on the frozen geometry of ``state``.

    The geometry is the plate position stored in ``state.displacement``; the
    height rate compares it with ``state.displacement_geom``. The elastic
    and z rows advance the plate implicitly by d + tau u2.

    Args:
        disc (Discretization): Mesh data.
        state (State): Previous state.
        params (PhysicalParams): Material coefficients and load.
        tau (float): Time step.
        ustar (UStar): Extrapolation inside the height-rate term.
        advecting (np.ndarray | None): Full velocity vector transporting
            momentum, the previous velocity when omitted. With the geometry
            and this field fixed the step is affine in the previous state
            and the load.

    Returns:
        The reduced system; its unknowns are free velocity, pressure, free z.
    """
    _check_finite(state.velocity, state.displacement, state.displacement_geom)
    layout = disc.layout
    geometry = build_geometry(disc.tables, state.displacement, state.displacement_geom, tau)
    transport = state.velocity if advecting is None else advecting
    advection = disc.velocity_at_points(transport) - geometry.w
    ops = assemble_fluid_operators(disc, geometry, advection, params.mu)

    rho = params.rho_f
    coeff, rhs_coeff = USTAR_COEFFICIENTS[ustar]
    Ms, Ks = disc.trace_mass, disc.trace_stiffness
    E = disc.trace_embedding()
    plate = params.rho_s / tau * Ms + (params.gamma1 * tau + params.gamma3) * Ks
    K_uu = (rho / tau) * ops.mass + (coeff * rho) * ops.mass_rate + (0.5 * rho) * ops.convection + ops.viscous
    K_uu = K_uu + E @ plate @ E.T

    u_old = state.velocity
    xi_old = layout.trace_velocity(u_old)
    d_old = state.displacement
    load = load_vector(disc.surface, params.forcing, state.t + tau)
    rhs_u = (rho / tau) * (ops.mass @ u_old) + (rhs_coeff * rho) * (ops.mass_rate @ u_old)
    rhs_u = rhs_u + E @ (params.rho_s / tau * (Ms @ xi_old) - params.gamma1 * (Ks @ d_old) + load)
    rhs = np.concatenate([rhs_u, np.zeros(layout.n_pressure), -(Ks @ d_old)])

    B = ops.divergence
    full = sp.bmat(
        [
            [K_uu, -B.T, -params.gamma2 * (E @ Ks)],
            [-B, None, None],
            [tau * (Ks @ E.T), None, Ms],
        ],
        format="csr",
    )
    free, blocks, full_blocks = _semi_blocks(layout)
    matrix = full[free][:, free].tocsr()
    matrix.eliminate_zeros()
    logging.debug(f"[Assembly] semi-implicit system {matrix.shape[0]} unknowns, {matrix.nnz} nonzeros.")
    return LinearSystem(
        matrix=matrix,
        rhs=rhs[free],
        layout=layout,
        free=free,
        blocks=blocks,
        full_blocks=full_blocks,
    )


def initial_curvature(disc: Discretization, displacement: np.ndarray) -> np.ndarray:
    """z with (z, psi) + (d_x d, d_x psi) = 0 for every free trace test function."""
    free = disc.layout.free_trace
    Ms = disc.trace_mass[free][:, free].tocsc()
    z = np.zeros(disc.layout.n_trace)
    z[free] = spsolve(Ms, -(disc.trace_stiffness @ displacement)[free])
    return z


@dataclass(frozen=True)
class FullyImplicitResidual:
    """Residual of the nonlinear step, split by equation (free rows only)."""

    momentum: np.ndarray
    continuity: np.ndarray
    curvature: np.ndarray
    displacement: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        """Stacked residual in unknown order."""
        return np.concatenate([self.momentum, self.continuity, self.curvature, self.displacement])

    @property
    def norm(self) -> float:
        """Infinity norm of the stacked residual."""
        v = self.vector
        return float(np.max(np.abs(v))) if v.size else 0.0


def newton_free(layout: DofLayout) -> tuple[np.ndarray, dict[str, slice]]:
    """Free unknowns of the nonlinear step in [velocity | pressure | z | d] and their full slices."""
    nv, npres, ntr = layout.n_velocity, layout.n_pressure, layout.n_trace
    free = np.concatenate(
        [
            layout.free_velocity,
            nv + np.arange(npres),
            nv + npres + layout.free_trace,
            nv + npres + ntr + layout.free_trace,
        ],
    )
    full_blocks = {
        "velocity": slice(0, nv),
        "pressure": slice(nv, nv + npres),
        "curvature": slice(nv + npres, nv + npres + ntr),
        "displacement": slice(nv + npres + ntr, nv + npres + 2 * ntr),
    }
    return free, full_blocks


def pack_newton(layout: DofLayout, velocity: np.ndarray, pressure: np.ndarray, curvature: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Reduced Newton vector from full fields."""
    free, _ = newton_free(layout)
    return np.concatenate([velocity, pressure, curvature, displacement])[free]


def unpack_newton(layout: DofLayout, x: np.ndarray) -> dict[str, np.ndarray]:
    """Full fields from a reduced Newton vector."""
    free, full_blocks = newton_free(layout)
    if x.shape != free.shape:
        raise DimensionError(f"Newton vector has shape {x.shape}, expected {free.shape}")
    full = np.zeros(layout.n_velocity + layout.n_pressure + 2 * layout.n_trace)
    full[free] = x
    return {name: full[s].copy() for name, s in full_blocks.items()}


def _newton_local(
    disc: Discretization,
    params: PhysicalParams,
    tau: float,
    velocity: np.ndarray,
    velocity_old: np.ndarray,
    pressure: np.ndarray,
    geometry: GeometryCache,
    jacobian: bool,
) -> list[dict]:
    tables = disc.tables
    phi = tables.phi
    psi = phi[:, :3]
    dell = tables.dell
    rho, mu = params.rho_f, params.mu
    N_all = geometry.N
    u_loc = disc.element_velocity(velocity)
    u_old_loc = disc.element_velocity(velocity_old)
    p_loc = pressure[disc.layout.tri_vertex_dofs]
    vel_dofs = disc.layout.element_velocity_dofs
    pres_dofs = disc.layout.tri_vertex_dofs
    trace_nodes = tables.trace_nodes

    def kernel(sl: slice) -> dict:
        W = tables.weights[sl]
        H = geometry.height[sl]
        rate = geometry.rate[sl]
        x2 = tables.x2[sl]
        G = tables.grads[sl]
        N = N_all[sl]
        GN = _cofactor_gradients(G, N)
        U = np.einsum("qa,eca->eqc", phi, u_loc[sl])
        U_old = np.einsum("qa,eca->eqc", phi, u_old_loc[sl])
        GU = np.einsum("eca,eqak->eqck", u_loc[sl], G)
        A = np.einsum("eqck,eqkl->eqcl", GU, N)
        S = 0.5 * (A + A.swapaxes(-1, -2))
        P = np.einsum("qk,ek->eq", psi, p_loc[sl])
        v = U.copy()
        v[..., 1] -= x2 * rate
        Av = np.einsum("eqcl,eql->eqc", A, v)
        gv = np.einsum("eqbl,eql->eqb", GN, v)

        momentum = (
            np.einsum("eq,eqd,qb->edb", W * (rho / tau) * H, U - U_old, phi)
            + np.einsum("eq,eqd,qb->edb", W * 0.5 * rho * rate, U, phi)
            + 0.5 * rho * (np.einsum("eq,eqd,qb->edb", W, Av, phi) - np.einsum("eq,eqb,eqd->edb", W, gv, U))
            + 2.0 * mu * np.einsum("eq,eqdl,eqbl->edb", W / H, S, GN)
            - np.einsum("eq,eqbd->edb", W * P, GN)
        )
        continuity = -np.einsum("eq,qk,eq->ek", W, psi, np.einsum("eqcc->eq", A))
        rows, prow, trow = vel_dofs[sl], pres_dofs[sl], trace_nodes[sl]
        out = {
            "momentum": (rows.ravel(), momentum.reshape(rows.shape).ravel()),
            "continuity": (prow.ravel(), continuity.ravel()),
        }
        if not jacobian:
            return out

        scalar = np.einsum("eq,qa,qb->eba", W * ((rho / tau) * H + 0.5 * rho * rate), phi, phi)
        conv = np.einsum("eq,eqa,qb->eba", W, gv, phi)
        scalar = scalar + 0.5 * rho * (conv - conv.transpose(0, 2, 1))
        scalar = scalar + mu * np.einsum("eq,eqal,eqbl->eba", W / H, GN, GN)
        J_uu = (
            _vector_block(scalar)
            + 0.5 * rho * np.einsum("eq,eqdc,qa,qb->edbca", W, A, phi, phi)
            - 0.5 * rho * np.einsum("eq,eqbc,qa,eqd->edbca", W, GN, phi, U)
            + mu * np.einsum("eq,eqad,eqbc->edbca", W / H, GN, GN)
        )
        J_up = -np.einsum("eq,qk,eqbd->edbk", W, psi, GN)
        J_pu = -np.einsum("eq,qk,eqac->ekca", W, psi, GN)

        ell = tables.ell[sl]
        dN = np.zeros(ell.shape + (2, 2))
        dN[..., 0, 0] = ell
        dN[..., 1, 0] = -x2[..., None] * dell
        dv = np.zeros(ell.shape + (2,))
        dv[..., 1] = -x2[..., None] * ell / tau
        GUdN = np.einsum("eqck,eqtkl->eqtcl", GU, dN)
        GbdN = np.einsum("eqbk,eqtkl->eqtbl", G, dN)
        dS = 0.5 * (GUdN + GUdN.swapaxes(-1, -2))
        transport = np.einsum("eqtdl,eql->eqtd", GUdN, v) + np.einsum("eqdl,eqtl->eqtd", A, dv)
        test_transport = np.einsum("eqtbl,eql->eqtb", GbdN, v) + np.einsum("eqbl,eqtl->eqtb", GN, dv)
        J_ud = (
            np.einsum("eq,eqt,eqd,qb->edbt", W * rho / tau, ell, U - U_old, phi)
            + np.einsum("eq,eqt,eqd,qb->edbt", W * 0.5 * rho / tau, ell, U, phi)
            + 0.5 * rho * (
                np.einsum("eq,eqtd,qb->edbt", W, transport, phi)
                - np.einsum("eq,eqtb,eqd->edbt", W, test_transport, U)
            )
            + 2.0 * mu * (
                np.einsum("eq,eqtdl,eqbl->edbt", W / H, dS, GN)
                + np.einsum("eq,eqdl,eqtbl->edbt", W / H, S, GbdN)
                - np.einsum("eq,eqt,eqdl,eqbl->edbt", W / H**2, ell, S, GN)
            )
            - np.einsum("eq,eqtbd->edbt", W * P, GbdN)
        )
        J_pd = -np.einsum("eq,qk,eqt->ekt", W, psi, np.einsum("eqtcc->eqt", GUdN))
        out.update(
            {
                "J_uu": _triplets(rows, rows, J_uu),
                "J_up": _triplets(rows, prow, J_up),
                "J_pu": _triplets(prow, rows, J_pu),
                "J_ud": _triplets(rows, trow, J_ud),
                "J_pd": _triplets(prow, trow, J_pd),
            },
        )
        return out

    return _map_chunks(kernel, disc.n_elements, disc.threads)


def _newton_fields(guess: "State", state_km1: "State") -> tuple[np.ndarray, ...]:
    _check_finite(guess.velocity, guess.pressure, guess.curvature, guess.displacement, state_km1.velocity)
    return guess.velocity, guess.pressure, guess.curvature, guess.displacement


def _residual_from_fields(
    disc: Discretization,
    params: PhysicalParams,
    tau: float,
    t: float,
    fields: tuple[np.ndarray, ...],
    velocity_old: np.ndarray,
    displacement_old: np.ndarray,
) -> FullyImplicitResidual:
    layout = disc.layout
    u, p, z, d = fields
    geometry = build_geometry(disc.tables, d, displacement_old, tau)
    results = _newton_local(disc, params, tau, u, velocity_old, p, geometry, jacobian=False)
    Ms, Ks = disc.trace_mass, disc.trace_stiffness
    xi = layout.trace_velocity(u)
    xi_old = layout.trace_velocity(velocity_old)
    momentum = _gather_vector(results, "momentum", layout.n_velocity)
    plate = (
        params.rho_s / tau * (Ms @ (xi - xi_old))
        + params.gamma1 * (Ks @ d)
        - params.gamma2 * (Ks @ z)
        + params.gamma3 * (Ks @ xi)
        - load_vector(disc.surface, params.forcing, t)
    )
    np.add.at(momentum, layout.top_u2_dofs, plate)
    continuity = _gather_vector(results, "continuity", layout.n_pressure)
    curvature = Ms @ z + Ks @ d
    displacement = d - displacement_old - tau * xi
    return FullyImplicitResidual(
        momentum=momentum[layout.free_velocity],
        continuity=continuity,
        curvature=curvature[layout.free_trace],
        displacement=displacement[layout.free_trace],
    )


def assemble_fully_implicit_residual(
    disc: Discretization,
    guess: "State",
    state_km1: "State",
    params: PhysicalParams,
    tau: float,
) -> FullyImplicitResidual:
    """Residual of the nonlinear step with every geometric quantity taken at the guess.

    Args:
        disc (Discretization): Mesh data.
        guess (State): Candidate (u^k, p^k, z^k, d^k) at time ``guess.t``.
        state_km1 (State): Previous state.
        params (PhysicalParams): Material coefficients and load.
        tau (float): Time step.

    Returns:
        The residual split into continuity, momentum, z and displacement rows.
    """
    return _residual_from_fields(
        disc, params, tau, guess.t, _newton_fields(guess, state_km1), state_km1.velocity, state_km1.displacement,
    )


def _finite_difference_jacobian(
    disc: Discretization,
    params: PhysicalParams,
    tau: float,
    t: float,
    x0: np.ndarray,
    velocity_old: np.ndarray,
    displacement_old: np.ndarray,
) -> sp.csr_matrix:
    layout = disc.layout

    def residual(x: np.ndarray) -> np.ndarray:
        f = unpack_newton(layout, x)
        fields = (f["velocity"], f["pressure"], f["curvature"], f["displacement"])
        return _residual_from_fields(disc, params, tau, t, fields, velocity_old, displacement_old).vector

    n = x0.size
    if n > 2000:
        logging.warning(f"[Assembly] finite-difference Jacobian of size {n} needs {2 * n} residual evaluations.")
    columns = np.empty((n, n))
    for j in range(n):
        step = 1e-7 * (1.0 + abs(x0[j]))
        xp, xm = x0.copy(), x0.copy()
        xp[j] += step
        xm[j] -= step
        columns[:, j] = (residual(xp) - residual(xm)) / (2.0 * step)
    return sp.csr_matrix(columns)


def assemble_fully_implicit_jacobian(
    disc: Discretization,
    guess: "State",
    state_km1: "State",
    params: PhysicalParams,
    tau: float,
    mode: JacobianMode = "analytic",
) -> sp.csr_matrix:
    """Jacobian of :func:`assemble_fully_implicit_residual` with respect to the reduced unknowns.

    Args:
        disc (Discretization): Mesh data.
        guess (State): Linearization point.
        state_km1 (State): Previous state.
        params (PhysicalParams): Material coefficients and load.
        tau (float): Time step.
        mode (JacobianMode): ``analytic`` or ``finite_difference``.

    Returns:
        Sparse matrix ordered like :func:`newton_free`.
    """
    layout = disc.layout
    fields = _newton_fields(guess, state_km1)
    if mode == "finite_difference":
        x0 = pack_newton(layout, *fields)
        return _finite_difference_jacobian(disc, params, tau, guess.t, x0, state_km1.velocity, state_km1.displacement)

    u, p, _, d = fields
    geometry = build_geometry(disc.tables, d, state_km1.displacement, tau)
    results = _newton_local(disc, params, tau, u, state_km1.velocity, p, geometry, jacobian=True)
    nv, npres, ntr = layout.n_velocity, layout.n_pressure, layout.n_trace
    Ms, Ks = disc.trace_mass, disc.trace_stiffness
    E = disc.trace_embedding()
    J_uu = _gather(results, "J_uu", (nv, nv)) + E @ (params.rho_s / tau * Ms + params.gamma3 * Ks) @ E.T
    J_ud = _gather(results, "J_ud", (nv, ntr)) + params.gamma1 * (E @ Ks)
    full = sp.bmat(
        [
            [J_uu, _gather(results, "J_up", (nv, npres)), -params.gamma2 * (E @ Ks), J_ud],
            [_gather(results, "J_pu", (npres, nv)), None, None, _gather(results, "J_pd", (npres, ntr))],
            [None, None, Ms, Ks],
            [-tau * E.T, None, None, sp.identity(ntr, format="csr")],
        ],
        format="csr",
    )
    free, _ = newton_free(layout)
    return full[free][:, free].tocsr()
