import numpy as np
import pytest

from libraries.diagnostics import fit_rate
from libraries.errors import DataError, DimensionError
from libraries.geometry import trace_at
from libraries.mesh import build_reference_mesh
from libraries.operators import (
    TraceField,
    discrete_laplace,
    project_initial_velocity,
    riesz_project,
    surface_mass,
    surface_stiffness,
    trace_l2_error,
)
from libraries.spaces import build_layout


def _circulant(diagonal, off, n):
    return diagonal * np.eye(n) + off * (np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1))


def _surface(n, length=2.0):
    return build_reference_mesh(length, n, 1).surface()


def test_trace_matrices_match_dense_oracle():
    surface = _surface(8)
    dx = surface.dx
    assert np.allclose(surface_mass(surface).toarray(), dx / 6.0 * _circulant(4.0, 1.0, 8), atol=1e-15)
    assert np.allclose(surface_stiffness(surface).toarray(), _circulant(2.0, -1.0, 8) / dx, atol=1e-13)


def test_discrete_laplace_has_zero_mean_and_is_linear():
    surface = _surface(16)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=16), rng.normal(size=16)
    za = discrete_laplace(TraceField(surface, a))
    zb = discrete_laplace(TraceField(surface, b))
    assert za.role == "curvature"
    assert abs(za.integral()) <= 1e-13 * max(1.0, np.max(np.abs(za.values)))
    combined = discrete_laplace(TraceField(surface, 2.0 * a - 3.0 * b))
    assert np.allclose(combined.values, 2.0 * za.values - 3.0 * zb.values, atol=1e-12 * np.max(np.abs(combined.values)))


def test_riesz_projection_is_idempotent():
    surface = _surface(12)
    first = riesz_project(lambda x: np.sin(np.pi * x) + 0.3 * np.cos(2 * np.pi * x), surface)
    second = riesz_project(
        lambda x: trace_at(surface, first.values, x)[0],
        surface,
        derivative=lambda x: trace_at(surface, first.values, x)[1],
    )
    assert np.allclose(second.values, first.values, atol=1e-12)


def test_riesz_projection_keeps_the_mean():
    surface = _surface(10)
    field = riesz_project(lambda x: 0.2 + np.sin(np.pi * x), surface, derivative=lambda x: np.pi * np.cos(np.pi * x))
    assert field.integral() == pytest.approx(0.4, abs=1e-12)


@pytest.mark.parametrize("n", [4, 16])
def test_riesz_projection_does_not_increase_the_slope_energy(n, rng):
    surface = _surface(n)
    stiffness = surface_stiffness(surface)
    modes = np.arange(1, 5)
    for _ in range(20):
        a, b = rng.normal(size=(2, modes.size))

        def smooth(x, a=a, b=b):
            phase = np.pi * np.multiply.outer(x, modes)
            return np.sin(phase) @ a + np.cos(phase) @ b

        values = riesz_project(smooth, surface).values
        # int_0^2 of the squared derivative, mode by mode
        exact = float(np.sum((a**2 + b**2) * (np.pi * modes) ** 2))
        assert values @ (stiffness @ values) <= exact * (1.0 + 1e-12)


def test_discrete_second_derivative_of_the_riesz_projection_converges():
    sizes = [8, 16, 32, 64, 128]
    errors = []
    for n in sizes:
        surface = _surface(n)
        projected = riesz_project(lambda x: np.sin(np.pi * x), surface, derivative=lambda x: np.pi * np.cos(np.pi * x))
        curvature = discrete_laplace(projected)
        errors.append(trace_l2_error(curvature, lambda x: -np.pi**2 * np.sin(np.pi * x)))
    assert fit_rate([2.0 / n for n in sizes], errors) >= 0.9


def test_trace_field_validation():
    surface = _surface(4)
    with pytest.raises(DimensionError):
        TraceField(surface, np.zeros(5))
    with pytest.raises(DataError):
        TraceField(surface, np.array([0.0, np.inf, 0.0, 0.0]))


def test_initial_velocity_interpolation(small_mesh):
    layout = build_layout(small_mesh)
    velocity = project_initial_velocity(lambda p: np.column_stack([p[:, 1], 2.0 * p[:, 1]]), small_mesh, layout)
    off = layout.velocity_offsets()
    assert np.allclose(velocity[off["u1_bubble"]], 0.0)
    assert np.allclose(velocity[layout.dirichlet], 0.0)
    # top u2 values are free and keep the interpolated value 2 * x2 = 2
    assert np.allclose(layout.trace_velocity(velocity), 2.0)
    with pytest.raises(DataError):
        project_initial_velocity(lambda p: np.full((p.shape[0], 2), np.nan), small_mesh, layout)
