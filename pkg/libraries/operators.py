"""Operators on the plate trace space and projections of initial data."""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from libraries.errors import DataError, DimensionError, SingularMatrixError
from libraries.mesh import Mesh, SurfaceMesh
from libraries.quadrature import gauss_segment
from libraries.spaces import DofLayout

TraceRole = Literal["displacement", "velocity", "curvature"]

SMOOTH_GAUSS_POINTS = 5


@dataclass(frozen=True)
class TraceField:
    """Nodal values of a periodic P1 field on the plate."""

    surface: SurfaceMesh
    values: np.ndarray
    role: TraceRole = "displacement"

    def __post_init__(self) -> None:
        """Check shape and finiteness of the values."""
        if self.values.shape != (self.surface.n_nodes,):
            raise DimensionError(f"trace field has shape {self.values.shape}, expected ({self.surface.n_nodes},)")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"non-finite {self.role} values")

    def integral(self) -> float:
        """Integral over Sigma."""
        return float(np.asarray(surface_mass(self.surface).sum(axis=0)).ravel() @ self.values)


def _assemble_segments(surface: SurfaceMesh, local: np.ndarray) -> sp.csr_matrix:
    seg = surface.segments
    n = surface.n_nodes
    rows = np.repeat(seg, 2, axis=1).ravel()
    cols = np.tile(seg, (1, 2)).ravel()
    data = np.tile(local.ravel(), seg.shape[0])
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def surface_mass(surface: SurfaceMesh) -> sp.csr_matrix:
    """Periodic P1 mass matrix on Sigma."""
    return _assemble_segments(surface, surface.dx / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]]))


def surface_stiffness(surface: SurfaceMesh) -> sp.csr_matrix:
    """Periodic P1 stiffness matrix on Sigma."""
    return _assemble_segments(surface, np.array([[1.0, -1.0], [-1.0, 1.0]]) / surface.dx)


def discrete_laplace(field: TraceField) -> TraceField:
    """Discrete second derivative z with (z, psi) + (d_x eta, d_x psi) = 0.

    Args:
        field (TraceField): Displacement on the periodic trace space.

    Returns:
        The curvature field z, whose integral vanishes.
    """
    mass = surface_mass(field.surface).tocsc()
    try:
        lu = splu(mass)
    except RuntimeError as exc:
        raise SingularMatrixError(f"trace mass matrix is singular: {exc}") from exc
    z = lu.solve(-(surface_stiffness(field.surface) @ field.values))
    return TraceField(surface=field.surface, values=z, role="curvature")


def segment_quadrature(surface: SurfaceMesh, n_points: int = SMOOTH_GAUSS_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Gauss points and weights on every segment, shape (n_segments, n_points)."""
    t, w = gauss_segment(n_points)
    x = surface.coordinates[:, None] + surface.dx * t[None, :]
    return x, np.broadcast_to(surface.dx * w, x.shape)


def riesz_project(
    func: Callable[[np.ndarray], np.ndarray],
    surface: SurfaceMesh,
    derivative: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TraceField:
    """H1-seminorm projection onto the trace space with matched mean.

    Args:
        func (Callable): Periodic function on Sigma.
        surface (SurfaceMesh): Trace grid.
        derivative (Callable | None): d func / d x1. Without it the load
            int func' psi' is taken segment by segment from the endpoint
            values, which is exact for P1 test functions.

    Returns:
        The projected displacement.
    """
    n = surface.n_nodes
    x, w = segment_quadrature(surface)
    seg = surface.segments
    if derivative is not None:
        slope_integral = np.sum(w * derivative(x), axis=1)
    else:
        nodes = surface.coordinates
        slope_integral = func(np.append(nodes[1:], surface.length)) - func(nodes)
    load = np.zeros(n)
    np.add.at(load, seg[:, 0], -slope_integral / surface.dx)
    np.add.at(load, seg[:, 1], slope_integral / surface.dx)
    mean = float(np.sum(w * func(x)))

    weights = np.asarray(surface_mass(surface).sum(axis=0)).ravel()
    bordered = sp.bmat(
        [
            [surface_stiffness(surface), sp.csr_matrix(weights[:, None])],
            [sp.csr_matrix(weights[None, :]), None],
        ],
        format="csc",
    )
    solution = splu(bordered).solve(np.append(load, mean))
    return TraceField(surface=surface, values=solution[:n], role="displacement")


def trace_l2_error(field: TraceField, exact: Callable[[np.ndarray], np.ndarray]) -> float:
    """L2 distance between a P1 trace field and a smooth function."""
    x, w = segment_quadrature(field.surface)
    t = (x - field.surface.coordinates[:, None]) / field.surface.dx
    seg = field.surface.segments
    values = (1.0 - t) * field.values[seg[:, :1]] + t * field.values[seg[:, 1:]]
    return float(np.sqrt(np.sum(w * (values - exact(x)) ** 2)))


def project_initial_velocity(
    u0: Callable[[np.ndarray], np.ndarray],
    mesh: Mesh,
    layout: DofLayout,
) -> np.ndarray:
    """Nodal interpolation of an initial velocity into the MINI space.

    Args:
        u0 (Callable): Maps points (n, 2) to velocities (n, 2).
        mesh (Mesh): Reference mesh.
        layout (DofLayout): Dof layout.

    Returns:
        Full velocity vector: interpolated vertex values, zero bubbles,
        zero on the Dirichlet dofs.
    """
    values = np.asarray(u0(mesh.distinct_vertices), dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite initial velocity")
    velocity = np.zeros(layout.n_velocity)
    off = layout.velocity_offsets()
    velocity[off["u1_vertex"]] = values[:, 0]
    velocity[off["u2_vertex"]] = values[:, 1]
    velocity[layout.dirichlet] = 0.0
    return velocity
