import numpy as np
import pytest

from libraries.assembly import build_discretization
from libraries.errors import DomainError, StructuralError
from libraries.mesh import build_reference_mesh, is_nested, refine_uniform


@pytest.mark.parametrize(("nx", "ny"), [(2, 1), (8, 4), (10, 5), (16, 8)])
def test_areas_cover_the_rectangle(nx, ny):
    mesh = build_reference_mesh(2.0, nx, ny)
    areas = mesh.signed_areas()
    assert np.all(areas > 0.0)
    assert np.sum(areas) == pytest.approx(2.0, rel=1e-13)
    assert mesh.n_triangles == 2 * nx * ny
    assert mesh.n_distinct_vertices == nx * (ny + 1)


def test_refinement_keeps_area_and_nests():
    coarse = build_reference_mesh(2.0, 4, 2)
    fine = refine_uniform(refine_uniform(coarse))
    assert (fine.nx, fine.ny, fine.level) == (16, 8, 2)
    assert np.sum(fine.signed_areas()) == pytest.approx(2.0, rel=1e-13)
    assert is_nested(coarse, fine)
    fine_points = {tuple(p) for p in np.round(fine.vertices, 12)}
    assert all(tuple(p) in fine_points for p in np.round(coarse.vertices, 12))


def test_non_nested_meshes():
    assert not is_nested(build_reference_mesh(2.0, 8, 4), build_reference_mesh(2.0, 12, 6))
    assert not is_nested(build_reference_mesh(2.0, 8, 4), build_reference_mesh(1.0, 16, 8))


def test_mesh_size():
    assert build_reference_mesh(2.0, 8, 4).h == pytest.approx(3.54e-1, abs=1e-3)
    assert build_reference_mesh(2.0, 10, 5).h == pytest.approx(2.83e-1, abs=1e-3)


def test_locate_points_reproduces_points():
    mesh = build_reference_mesh(2.0, 8, 4)
    rng = np.random.default_rng(0)
    points = np.column_stack([rng.uniform(0.0, 2.0, 200), rng.uniform(0.0, 1.0, 200)])
    tri, bary = mesh.locate_points(points)
    assert np.all(bary >= -1e-12)
    assert np.allclose(bary.sum(axis=1), 1.0, atol=1e-14)
    mapped = np.einsum("na,nak->nk", bary, mesh.triangle_coords[tri])
    assert np.allclose(mapped, points, atol=1e-13)


def test_locate_point_wraps_periodically():
    mesh = build_reference_mesh(2.0, 8, 4)
    tri, bary = mesh.locate_point(np.array([2.3, 0.4]))
    tri_ref, bary_ref = mesh.locate_point(np.array([0.3, 0.4]))
    assert tri == tri_ref
    assert np.allclose(bary, bary_ref, atol=1e-13)


def test_locate_point_outside():
    mesh = build_reference_mesh(2.0, 8, 4)
    with pytest.raises(DomainError):
        mesh.locate_point(np.array([0.5, 1.5]))


def test_invalid_grids():
    with pytest.raises(StructuralError):
        build_reference_mesh(2.0, 1, 4)
    with pytest.raises(StructuralError):
        build_reference_mesh(2.0, 4, 0)


def test_periodic_merge_and_surface():
    mesh = build_reference_mesh(2.0, 4, 2)
    left, right = mesh.periodic_pairs.T
    assert np.array_equal(mesh.merged[left], mesh.merged[right])
    surface = mesh.surface()
    assert surface.n_nodes == 4
    assert np.allclose(surface.coordinates, [0.0, 0.5, 1.0, 1.5])
    top_vertices = mesh.triangle_coords[surface.parent_triangles][:, :, 1]
    assert np.all(np.sum(np.isclose(top_vertices, 1.0), axis=1) == 2)


def test_clamped_plate_shares_the_closed_surface_grid(small_mesh):
    periodic = build_discretization(small_mesh, "periodic")
    clamped = build_discretization(small_mesh, "clamped")
    assert np.array_equal(clamped.surface.segments, [[0, 1], [1, 2], [2, 3], [3, 0]])
    assert (clamped.trace_stiffness != periodic.trace_stiffness).nnz == 0
    assert np.array_equal(clamped.layout.free_trace, [1, 2, 3])


def test_write_vtk(tmp_path, small_mesh):
    path = tmp_path / "mesh.vtk"
    values = np.arange(small_mesh.n_distinct_vertices, dtype=float)
    small_mesh.write_vtk(str(path), point_data={"values": values})
    text = path.read_text()
    assert text.startswith("# vtk DataFile")
    assert "values" in text
