"""Structured periodic triangulations of the reference rectangle (0, L1) x (0, 1)."""

import logging
import math
from dataclasses import dataclass, field

import meshio
import numpy as np

from libraries.errors import DomainError, StructuralError

LOCATE_TOL = 1e-12


@dataclass(frozen=True)
class SurfaceMesh:
    """1D grid on the top boundary Sigma = (0, L1).

    Node ``i`` sits at ``x1 = i * dx``; segment ``i`` joins node ``i`` and
    node ``(i + 1) % n_nodes``. The grid always closes over the periodic
    seam; a clamped plate fixes its seam node instead.
    """

    length: float
    n_nodes: int
    parent_triangles: np.ndarray

    @property
    def dx(self) -> float:
        """Segment length."""
        return self.length / self.n_nodes

    @property
    def coordinates(self) -> np.ndarray:
        """x1 coordinate of every node."""
        return np.arange(self.n_nodes) * self.dx

    @property
    def segments(self) -> np.ndarray:
        """Node pairs of every segment, periodic closure included."""
        left = np.arange(self.n_nodes)
        return np.column_stack([left, (left + 1) % self.n_nodes])

    def locate(self, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Find the segment and the local coordinate of points on Sigma.

        Args:
            x1 (np.ndarray): Abscissae, wrapped modulo L1.

        Returns:
            Segment indices and local coordinates in [0, 1].
        """
        x1 = np.mod(np.asarray(x1, dtype=float), self.length)
        seg = np.minimum(np.floor(x1 / self.dx).astype(int), self.n_nodes - 1)
        return seg, x1 / self.dx - seg


@dataclass(frozen=True)
class Mesh:
    """Structured triangulation with periodic identification in x1.

    ``vertices`` holds the geometric grid points, the column ``x1 = L1``
    included; ``merged`` maps each of them to its periodic representative.
    Cell ``(i, j)`` is split along its lower-left to upper-right diagonal
    into triangles ``2 * (j * nx + i)`` (lower right) and ``+ 1`` (upper left).
    """

    length: float
    nx: int
    ny: int
    level: int
    vertices: np.ndarray
    triangles: np.ndarray
    merged: np.ndarray
    periodic_pairs: np.ndarray
    boundary_tags: dict[str, np.ndarray] = field(repr=False)

    @property
    def dx(self) -> float:
        """Cell width."""
        return self.length / self.nx

    @property
    def dy(self) -> float:
        """Cell height."""
        return 1.0 / self.ny

    @property
    def h(self) -> float:
        """Hypotenuse of a cell triangle."""
        return math.hypot(self.dx, self.dy)

    @property
    def n_triangles(self) -> int:
        """Number of triangles."""
        return self.triangles.shape[0]

    @property
    def n_distinct_vertices(self) -> int:
        """Number of vertices after periodic merge."""
        return self.nx * (self.ny + 1)

    @property
    def distinct_vertices(self) -> np.ndarray:
        """Coordinates of the merged vertices, indexed by merged number."""
        return self.vertices[np.unique(self.merged, return_index=True)[1]]

    @property
    def triangle_column(self) -> np.ndarray:
        """Cell column index of every triangle."""
        return (np.arange(self.n_triangles) // 2) % self.nx

    @property
    def triangle_coords(self) -> np.ndarray:
        """Vertex coordinates of every triangle, shape (n_triangles, 3, 2)."""
        return self.vertices[self.triangles]

    def signed_areas(self) -> np.ndarray:
        """Signed area of every triangle."""
        p = self.triangle_coords
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def vertex_index(self, i: int | np.ndarray, j: int | np.ndarray) -> int | np.ndarray:
        """Geometric vertex index of grid point (i, j)."""
        return j * (self.nx + 1) + i

    def surface(self) -> SurfaceMesh:
        """Induced surface mesh on the top boundary, nodes at the top vertices x1 = i * dx."""
        parents = 2 * ((self.ny - 1) * self.nx + np.arange(self.nx)) + 1
        return SurfaceMesh(
            length=self.length,
            n_nodes=self.nx,
            parent_triangles=parents,
        )

    def locate_point(self, point: np.ndarray) -> tuple[int, np.ndarray]:
        """Find a triangle containing ``point`` and its barycentric coordinates.

        Args:
            point (np.ndarray): Coordinates (x1, x2); x1 is wrapped modulo L1.

        Returns:
            Triangle index and barycentric coordinates.
        """
        tri, bary = self.locate_points(np.asarray(point, dtype=float).reshape(1, 2))
        return int(tri[0]), bary[0]

    def locate_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`locate_point`.

        Args:
            points (np.ndarray): Coordinates, shape (n, 2).

        Returns:
            Triangle indices (n,) and barycentric coordinates (n, 3).
        """
        points = np.asarray(points, dtype=float)
        x1 = np.mod(points[:, 0], self.length)
        x2 = points[:, 1]
        if np.any(x2 < -LOCATE_TOL) or np.any(x2 > 1.0 + LOCATE_TOL):
            raise DomainError("point outside the reference rectangle")
        sx = x1 / self.dx
        sy = np.clip(x2, 0.0, 1.0) / self.dy
        i = np.minimum(np.floor(sx).astype(int), self.nx - 1)
        j = np.minimum(np.floor(sy).astype(int), self.ny - 1)
        a = sx - i
        b = sy - j
        lower = a >= b
        tri = 2 * (j * self.nx + i) + np.where(lower, 0, 1)
        # lower right (v00, v10, v11); upper left (v00, v11, v01)
        bary = np.where(
            lower[:, None],
            np.column_stack([1.0 - a, a - b, b]),
            np.column_stack([1.0 - b, a, b - a]),
        )
        return tri, bary

    def write_vtk(
        self,
        path: str,
        point_data: dict[str, np.ndarray] | None = None,
    ) -> None:
        """Dump the mesh as a legacy ASCII VTK unstructured grid.

        Args:
            path (str): Output file path.
            point_data (dict[str, np.ndarray] | None): Values per merged vertex.
        """
        points = np.column_stack([self.vertices, np.zeros(len(self.vertices))])
        data = {}
        for name, values in (point_data or {}).items():
            values = np.asarray(values)
            if values.ndim == 2 and values.shape[1] == 2:
                values = np.column_stack([values, np.zeros(len(values))])
            data[name] = values[self.merged]
        out = meshio.Mesh(points=points, cells=[("triangle", self.triangles)], point_data=data)
        meshio.write(path, out, file_format="vtk", binary=False)
        logging.info(f"[Mesh] wrote {path}.")


def build_reference_mesh(length: float, nx: int, ny: int, level: int = 0) -> Mesh:
    """Build the structured triangulation of (0, L1) x (0, 1).

    Args:
        length (float): Domain length L1.
        nx (int): Cells in x1, at least 2.
        ny (int): Cells in x2, at least 1.
        level (int): Refinement generation stored on the mesh.

    Returns:
        The mesh with 2 * nx * ny triangles.
    """
    if nx < 2:
        raise StructuralError(f"nx = {nx}: periodic identification needs at least 2 cells")
    if ny < 1:
        raise StructuralError(f"ny = {ny}: the mesh needs a top boundary")
    if not length > 0:
        raise StructuralError(f"domain length {length} must be positive")

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    vertices = np.column_stack([ii.ravel() * (length / nx), jj.ravel() * (1.0 / ny)])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci, cj = ci.ravel(), cj.ravel()
    v00 = cj * (nx + 1) + ci
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    triangles = np.empty((2 * nx * ny, 3), dtype=int)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])

    gi = ii.ravel()
    gj = jj.ravel()
    merged = gj * nx + np.mod(gi, nx)

    rows = np.arange(ny + 1)
    periodic_pairs = np.column_stack([rows * (nx + 1), rows * (nx + 1) + nx])
    boundary_tags = {
        "bottom": np.flatnonzero(gj == 0),
        "top": np.flatnonzero(gj == ny),
        "left": np.flatnonzero(gi == 0),
        "right": np.flatnonzero(gi == nx),
    }
    mesh = Mesh(
        length=float(length),
        nx=nx,
        ny=ny,
        level=level,
        vertices=vertices,
        triangles=triangles,
        merged=merged,
        periodic_pairs=periodic_pairs,
        boundary_tags=boundary_tags,
    )
    logging.info(f"[Mesh] built {nx}x{ny} grid on L1={length}: {mesh.n_triangles} triangles, h={mesh.h:.3e}.")
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children.

    Red refinement of the diagonal-split grid reproduces the diagonal-split
    grid of twice the resolution, so the child is built directly; every
    parent vertex reappears with identical coordinates.

    Args:
        mesh (Mesh): Parent mesh.

    Returns:
        The refined mesh, one level up.
    """
    return build_reference_mesh(mesh.length, 2 * mesh.nx, 2 * mesh.ny, level=mesh.level + 1)


def is_nested(coarse: Mesh, fine: Mesh) -> bool:
    """Check that every triangle of ``fine`` lies inside a triangle of ``coarse``."""
    if not math.isclose(coarse.length, fine.length):
        return False
    if fine.nx % coarse.nx or fine.ny % coarse.ny:
        return False
    return fine.nx // coarse.nx == fine.ny // coarse.ny
