"""Degree-of-freedom layouts for the MINI velocity, P1 pressure and P1 trace spaces.

Global velocity numbering (before constraint elimination)::

    [u1 at vertices | u2 at vertices | u1 bubbles | u2 bubbles]

with vertex dofs indexed by the merged (periodic) vertex number. The top
component-2 vertex dofs ARE the structure velocity: trace node ``i`` is the
top vertex ``(i, ny)``.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from libraries.errors import StructuralError
from libraries.mesh import Mesh
from libraries.quadrature import QuadratureRule

StructureBC = Literal["periodic", "clamped"]


@dataclass(frozen=True)
class BasisEval:
    """Shape functions of one element at one point.

    ``values``/``gradients`` hold the three P1 functions followed by the
    bubble ``27 l0 l1 l2``; pressure uses the first three entries.
    """

    values: np.ndarray
    gradients: np.ndarray

    @property
    def pressure_values(self) -> np.ndarray:
        """P1 values."""
        return self.values[:3]


def reference_basis(bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tabulate the MINI scalar basis at barycentric points.

    Args:
        bary (np.ndarray): Barycentric coordinates, shape (n, 3).

    Returns:
        Values (n, 4) and gradients with respect to the reference
        coordinates (xi, eta), shape (n, 4, 2).
    """
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    values = np.column_stack([l0, l1, l2, 27.0 * l0 * l1 * l2])
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = np.empty((bary.shape[0], 4, 2))
    grads[:, :3, :] = dl[None, :, :]
    grads[:, 3, :] = 27.0 * (
        (l1 * l2)[:, None] * dl[0] + (l0 * l2)[:, None] * dl[1] + (l0 * l1)[:, None] * dl[2]
    )
    return values, grads


def affine_maps(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine data of triangles with vertex coordinates ``coords``.

    Args:
        coords (np.ndarray): Shape (n, 3, 2).

    Returns:
        Jacobians B (n, 2, 2) of x = x0 + B xi, their inverses, and det B.
    """
    b = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=2)
    det = b[:, 0, 0] * b[:, 1, 1] - b[:, 0, 1] * b[:, 1, 0]
    inv = np.empty_like(b)
    inv[:, 0, 0] = b[:, 1, 1] / det
    inv[:, 1, 1] = b[:, 0, 0] / det
    inv[:, 0, 1] = -b[:, 0, 1] / det
    inv[:, 1, 0] = -b[:, 1, 0] / det
    return b, inv, det


def evaluate_basis(triangle: np.ndarray, barycentric: np.ndarray) -> BasisEval:
    """Evaluate the MINI basis of one triangle at one point.

    Args:
        triangle (np.ndarray): Vertex coordinates, shape (3, 2).
        barycentric (np.ndarray): Barycentric coordinates, shape (3,).

    Returns:
        Values and physical gradients.
    """
    values, ref_grads = reference_basis(np.asarray(barycentric, dtype=float)[None, :])
    _, inv, _ = affine_maps(np.asarray(triangle, dtype=float)[None, :, :])
    grads = ref_grads[0] @ inv[0]
    return BasisEval(values=values[0], gradients=grads)


@dataclass(frozen=True)
class DofLayout:
    """Index maps and constraints of the discrete spaces on one mesh."""

    n_vertices: int
    n_triangles: int
    n_trace: int
    structure_bc: StructureBC
    tri_vertex_dofs: np.ndarray
    top_vertex_of_trace: np.ndarray
    dirichlet: np.ndarray
    free_velocity: np.ndarray
    free_trace: np.ndarray

    @property
    def n_velocity(self) -> int:
        """Velocity dofs before elimination."""
        return 2 * (self.n_vertices + self.n_triangles)

    @property
    def n_pressure(self) -> int:
        """Pressure dofs."""
        return self.n_vertices

    @property
    def n_free_velocity(self) -> int:
        """Velocity unknowns after elimination."""
        return self.free_velocity.size

    @property
    def n_free_trace(self) -> int:
        """Unknown trace nodes (z or displacement)."""
        return self.free_trace.size

    @property
    def step1_size(self) -> int:
        """Size of the semi-implicit linear system: free velocity, pressure, z."""
        return self.n_free_velocity + self.n_pressure + self.n_free_trace

    @property
    def newton_size(self) -> int:
        """Size of the fully implicit system: Step-1 unknowns plus displacement."""
        return self.step1_size + self.n_free_trace

    @property
    def unreduced_step1_size(self) -> int:
        """Step-1 size counted before constraint elimination, with z stored per vertex."""
        return self.n_velocity + self.n_pressure + self.n_vertices

    @property
    def unreduced_step2_size(self) -> int:
        """Size of a scalar MINI field (the displacement extension space)."""
        return self.n_vertices + self.n_triangles

    @property
    def element_velocity_dofs(self) -> np.ndarray:
        """Global velocity dofs per triangle, ordered (component, local basis), shape (n_t, 8)."""
        nv, nt = self.n_vertices, self.n_triangles
        bubble = np.arange(nt)
        comp0 = np.column_stack([self.tri_vertex_dofs, 2 * nv + bubble])
        comp1 = np.column_stack([nv + self.tri_vertex_dofs, 2 * nv + nt + bubble])
        return np.hstack([comp0, comp1])

    @property
    def top_u2_dofs(self) -> np.ndarray:
        """Global velocity index of the structure velocity at each trace node."""
        return self.n_vertices + self.top_vertex_of_trace

    def velocity_offsets(self) -> dict[str, slice]:
        """Slices of the velocity vector per block."""
        nv, nt = self.n_vertices, self.n_triangles
        return {
            "u1_vertex": slice(0, nv),
            "u2_vertex": slice(nv, 2 * nv),
            "u1_bubble": slice(2 * nv, 2 * nv + nt),
            "u2_bubble": slice(2 * nv + nt, 2 * nv + 2 * nt),
        }

    def scalar_components(self, velocity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a velocity vector into two scalar MINI coefficient vectors (vertices then bubbles)."""
        off = self.velocity_offsets()
        u1 = np.concatenate([velocity[off["u1_vertex"]], velocity[off["u1_bubble"]]])
        u2 = np.concatenate([velocity[off["u2_vertex"]], velocity[off["u2_bubble"]]])
        return u1, u2

    def reduced_velocity_index(self) -> np.ndarray:
        """Map from global velocity index to position among the free ones (-1 if constrained)."""
        index = -np.ones(self.n_velocity, dtype=int)
        index[self.free_velocity] = np.arange(self.n_free_velocity)
        return index

    def expand_velocity(self, free_values: np.ndarray) -> np.ndarray:
        """Scatter free velocity values into a full vector with zeros on constrained dofs."""
        full = np.zeros(self.n_velocity)
        full[self.free_velocity] = free_values
        return full

    def expand_trace(self, free_values: np.ndarray) -> np.ndarray:
        """Scatter free trace values into a full trace vector."""
        full = np.zeros(self.n_trace)
        full[self.free_trace] = free_values
        return full

    def trace_velocity(self, velocity: np.ndarray) -> np.ndarray:
        """Structure velocity xi = u2 on the top boundary."""
        return velocity[self.top_u2_dofs]


def build_layout(mesh: Mesh, structure_bc: StructureBC = "periodic") -> DofLayout:
    """Build the dof layout of the coupled MINI / P1 / P1-trace spaces.

    Args:
        mesh (Mesh): The reference mesh.
        structure_bc (StructureBC): ``periodic`` or ``clamped`` trace space.

    Returns:
        The layout.
    """
    if mesh.ny < 1 or mesh.boundary_tags["top"].size == 0:
        raise StructuralError("mesh has no top boundary")
    if structure_bc not in ("periodic", "clamped"):
        raise StructuralError(f"unknown structure boundary condition {structure_bc!r}")

    nv = mesh.n_distinct_vertices
    nt = mesh.n_triangles
    tri_vertex_dofs = mesh.merged[mesh.triangles]

    bottom = np.arange(mesh.nx)
    top = mesh.ny * mesh.nx + np.arange(mesh.nx)
    constrained = [bottom, nv + bottom, top]
    free_trace = np.arange(mesh.nx)
    if structure_bc == "clamped":
        constrained.append(nv + top[:1])
        free_trace = free_trace[1:]
    dirichlet = np.unique(np.concatenate(constrained))
    free_velocity = np.setdiff1d(np.arange(2 * (nv + nt)), dirichlet)

    layout = DofLayout(
        n_vertices=nv,
        n_triangles=nt,
        n_trace=mesh.nx,
        structure_bc=structure_bc,
        tri_vertex_dofs=tri_vertex_dofs,
        top_vertex_of_trace=top,
        dirichlet=dirichlet,
        free_velocity=free_velocity,
        free_trace=free_trace,
    )
    logging.info(
        f"[Layout] velocity {layout.n_free_velocity}/{layout.n_velocity} free, "
        f"pressure {layout.n_pressure}, trace {layout.n_free_trace}; step-1 size {layout.step1_size}.",
    )
    return layout


@dataclass(frozen=True)
class ElementTables:
    """Basis data of every triangle at the quadrature points.

    Shapes: ``weights`` (n_t, n_q) include the element Jacobian;
    ``points`` (n_t, n_q, 2); ``phi`` (n_q, 4); ``grads`` (n_t, n_q, 4, 2);
    ``trace_nodes`` (n_t, 2) are the trace nodes bounding the triangle's
    column; ``ell`` (n_t, n_q, 2) and ``dell`` (2,) are the trace hat
    functions of those nodes and their x1-derivatives.
    """

    weights: np.ndarray
    points: np.ndarray
    phi: np.ndarray
    grads: np.ndarray
    trace_nodes: np.ndarray
    ell: np.ndarray
    dell: np.ndarray

    @property
    def x2(self) -> np.ndarray:
        """Reference height of every quadrature point."""
        return self.points[..., 1]


def tabulate_elements(mesh: Mesh, rule: QuadratureRule) -> ElementTables:
    """Tabulate the MINI basis on every triangle.

    Args:
        mesh (Mesh): The mesh.
        rule (QuadratureRule): Quadrature on the reference triangle.

    Returns:
        The element tables.
    """
    coords = mesh.triangle_coords
    b, inv, det = affine_maps(coords)
    phi, ref_grads = reference_basis(rule.barycentric)
    grads = np.einsum("qak,ekj->eqaj", ref_grads, inv)
    points = coords[:, None, 0, :] + np.einsum("eij,qj->eqi", b, rule.points)
    weights = rule.weights[None, :] * np.abs(det)[:, None]

    col = mesh.triangle_column
    trace_nodes = np.column_stack([col, (col + 1) % mesh.nx])
    t = (points[..., 0] - (col * mesh.dx)[:, None]) / mesh.dx
    ell = np.stack([1.0 - t, t], axis=-1)
    dell = np.array([-1.0, 1.0]) / mesh.dx
    return ElementTables(
        weights=weights,
        points=points,
        phi=phi,
        grads=grads,
        trace_nodes=trace_nodes,
        ell=ell,
        dell=dell,
    )
