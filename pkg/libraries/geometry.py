"""ALE geometry of the graph map (x1, x2) -> (x1, (1 + d(x1)) x2).

The plate is stored as the shifted displacement ``d = eta - 1`` on the
trace nodes; the height used by every ALE formula is ``H = 1 + d``.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from libraries.errors import ContactError, DataError
from libraries.mesh import Mesh, SurfaceMesh
from libraries.spaces import ElementTables, affine_maps


@dataclass(frozen=True)
class AleFrame:
    """Deformation gradient and derived quantities at a set of points."""

    F: np.ndarray
    Finv: np.ndarray
    J: np.ndarray
    M: np.ndarray


def ale_closed_form(height: np.ndarray, slope: np.ndarray, x2: np.ndarray) -> AleFrame:
    """Evaluate F, F^-1, J and M = J F^-T from the plate height and slope.

    Args:
        height (np.ndarray): Plate height eta at the points' abscissae.
        slope (np.ndarray): d eta / d x1 at the same abscissae.
        x2 (np.ndarray): Reference heights of the points.

    Returns:
        The frame, matrices with trailing shape (2, 2).
    """
    height, slope, x2 = np.broadcast_arrays(
        np.asarray(height, dtype=float), np.asarray(slope, dtype=float), np.asarray(x2, dtype=float),
    )
    if np.any(height <= 0.0):
        raise ContactError(float(height.min()), 0.0)
    shape = height.shape + (2, 2)
    F = np.zeros(shape)
    F[..., 0, 0] = 1.0
    F[..., 1, 0] = x2 * slope
    F[..., 1, 1] = height
    Finv = np.zeros(shape)
    Finv[..., 0, 0] = 1.0
    Finv[..., 1, 0] = -x2 * slope / height
    Finv[..., 1, 1] = 1.0 / height
    M = np.zeros(shape)
    M[..., 0, 0] = height
    M[..., 0, 1] = -x2 * slope
    M[..., 1, 1] = 1.0
    return AleFrame(F=F, Finv=Finv, J=height.copy(), M=M)


def trace_at(surface: SurfaceMesh, values: np.ndarray, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and slope of a P1 trace field at abscissae ``x1``."""
    seg, t = surface.locate(x1)
    left = values[seg]
    right = values[(seg + 1) % surface.n_nodes]
    return (1.0 - t) * left + t * right, (right - left) / surface.dx


def ale_at_point(surface: SurfaceMesh, displacement: np.ndarray, point: np.ndarray) -> AleFrame:
    """ALE frame at reference point(s) for the shifted plate displacement.

    Args:
        surface (SurfaceMesh): Trace grid.
        displacement (np.ndarray): Shifted displacement d on the trace nodes.
        point (np.ndarray): Reference coordinates, shape (2,) or (n, 2).

    Returns:
        The frame at the point(s).
    """
    point = np.asarray(point, dtype=float)
    d, slope = trace_at(surface, displacement, point[..., 0])
    return ale_closed_form(1.0 + d, slope, point[..., 1])


def mesh_velocity(
    surface: SurfaceMesh,
    displacement: np.ndarray,
    displacement_prev: np.ndarray,
    tau: float,
    point: np.ndarray,
) -> np.ndarray:
    """Discrete mesh velocity w = (0, x2 D_t eta) at reference point(s).

    Args:
        surface (SurfaceMesh): Trace grid.
        displacement (np.ndarray): Displacement at the new level.
        displacement_prev (np.ndarray): Displacement at the old level.
        tau (float): Time step.
        point (np.ndarray): Reference coordinates, shape (2,) or (n, 2).

    Returns:
        Mesh velocity vectors with trailing shape (2,).
    """
    point = np.asarray(point, dtype=float)
    rate, _ = trace_at(surface, (displacement - displacement_prev) / tau, point[..., 0])
    w = np.zeros(point.shape)
    w[..., 1] = point[..., 1] * rate
    return w


@dataclass(frozen=True)
class GeometryCache:
    """ALE data at every quadrature point of one time step.

    ``height``/``slope`` describe the geometry the step is assembled on;
    ``height_prev`` is the geometry of the step before; ``rate`` is
    (height - height_prev) / tau at the point's abscissa.
    """

    height: np.ndarray
    slope: np.ndarray
    height_prev: np.ndarray
    rate: np.ndarray
    x2: np.ndarray

    @property
    def frame(self) -> AleFrame:
        """F, F^-1, J, M at the quadrature points."""
        return ale_closed_form(self.height, self.slope, self.x2)

    @property
    def J(self) -> np.ndarray:
        """Jacobian determinant (equal to the height)."""
        return self.height

    @property
    def N(self) -> np.ndarray:
        """J F^-1 = M^T, polynomial in the reference coordinates."""
        n = np.zeros(self.height.shape + (2, 2))
        n[..., 0, 0] = self.height
        n[..., 1, 0] = -self.x2 * self.slope
        n[..., 1, 1] = 1.0
        return n

    @property
    def w(self) -> np.ndarray:
        """Mesh velocity (0, x2 D_t eta)."""
        w = np.zeros(self.height.shape + (2,))
        w[..., 1] = self.x2 * self.rate
        return w


def trace_on_elements(tables: ElementTables, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and slope of a trace field at every element quadrature point."""
    nodal = values[tables.trace_nodes]
    return np.einsum("eqt,et->eq", tables.ell, nodal), (nodal @ tables.dell)[:, None] * np.ones(tables.ell.shape[1])


def build_geometry(
    tables: ElementTables,
    displacement: np.ndarray,
    displacement_prev: np.ndarray,
    tau: float,
) -> GeometryCache:
    """Build the geometry cache of one step.

    Args:
        tables (ElementTables): Element quadrature tables.
        displacement (np.ndarray): Displacement defining the step geometry.
        displacement_prev (np.ndarray): Displacement of the previous geometry.
        tau (float): Time step.

    Returns:
        The cache.
    """
    if not (np.all(np.isfinite(displacement)) and np.all(np.isfinite(displacement_prev))):
        raise DataError("non-finite plate displacement")
    d, slope = trace_on_elements(tables, displacement)
    d_prev, _ = trace_on_elements(tables, displacement_prev)
    height = 1.0 + d
    if np.any(height <= 0.0):
        raise ContactError(float(height.min()), 0.0)
    return GeometryCache(
        height=height,
        slope=slope,
        height_prev=1.0 + d_prev,
        rate=(d - d_prev) / tau,
        x2=tables.x2,
    )


@dataclass(frozen=True)
class DisplacementField:
    """Displacement extended into the reference domain.

    ``values`` are nodal values per merged vertex; ``trace`` the values on Sigma.
    """

    values: np.ndarray
    trace: np.ndarray


class DisplacementExtension:
    """Discrete x2-Laplace extension of the plate displacement into the domain.

    Solves int d_x2(eta) d_x2(psi) = 0 for P1 eta with eta = 0 on the
    bottom and eta = trace on the top. The matrix depends only on the mesh,
    so it is factorized once.
    """

    def __init__(self, mesh: Mesh) -> None:
        """Assemble and factorize the extension system.

        Args:
            mesh (Mesh): The reference mesh.
        """
        self.mesh = mesh
        nv = mesh.n_distinct_vertices
        _, inv, det = affine_maps(mesh.triangle_coords)
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        grad_x2 = np.einsum("ak,ek->ea", dlam, inv[:, :, 1])
        local = 0.5 * np.abs(det)[:, None, None] * grad_x2[:, :, None] * grad_x2[:, None, :]
        dofs = mesh.merged[mesh.triangles]
        rows = np.repeat(dofs, 3, axis=1).ravel()
        cols = np.tile(dofs, (1, 3)).ravel()
        self.stiffness = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()

        nx, ny = mesh.nx, mesh.ny
        self.interior = np.arange(nx, ny * nx)
        self.top = ny * nx + np.arange(nx)
        k_ii = self.stiffness[self.interior][:, self.interior].tocsc()
        self._k_it = self.stiffness[self.interior][:, self.top]
        self._lu = splu(k_ii) if self.interior.size else None
        logging.info(f"[Geometry] factorized extension system of size {self.interior.size}.")

    def extend(self, trace: np.ndarray) -> DisplacementField:
        """Extend a trace displacement into the domain.

        Args:
            trace (np.ndarray): Displacement at the trace nodes.

        Returns:
            The extended field.
        """
        values = np.zeros(self.mesh.n_distinct_vertices)
        values[self.top] = trace
        if self._lu is not None:
            values[self.interior] = self._lu.solve(-(self._k_it @ trace))
        return DisplacementField(values=values, trace=np.array(trace, dtype=float))

    def residual(self, values: np.ndarray) -> np.ndarray:
        """Extension residual at the interior vertices."""
        return (self.stiffness @ values)[self.interior]


def extend_displacement(trace: np.ndarray, mesh: Mesh) -> DisplacementField:
    """Extend the trace displacement into the reference domain.

    Args:
        trace (np.ndarray): Displacement at the trace nodes.
        mesh (Mesh): The reference mesh.

    Returns:
        The extended field, equal to x2 * trace(x1) at the vertices.
    """
    return DisplacementExtension(mesh).extend(trace)


def deformed_vertices(mesh: Mesh, field: DisplacementField) -> np.ndarray:
    """Physical coordinates of the merged vertices under the ALE map."""
    coords = mesh.distinct_vertices
    return np.column_stack([coords[:, 0], coords[:, 1] + field.values])
