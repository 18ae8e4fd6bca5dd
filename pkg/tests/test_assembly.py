import numpy as np
import pytest

from libraries import assembly
from libraries.assembly import (
    PhysicalParams,
    assemble_fluid_operators,
    assemble_fully_implicit_jacobian,
    assemble_fully_implicit_residual,
    assemble_semi_implicit,
    build_discretization,
    load_vector,
    newton_free,
)
from libraries.diagnostics import fit_rate
from libraries.geometry import build_geometry
from libraries.linsolve import factorize, solve
from libraries.spaces import evaluate_basis
from libraries.stepper import State, StepContext, build_mesh_for, initial_state, step_semi_implicit

TAU = 0.01


def _zero_state(disc, t=0.0, displacement=None):
    layout = disc.layout
    d = np.zeros(layout.n_trace) if displacement is None else displacement
    return State(
        t=t,
        step=0,
        velocity=np.zeros(layout.n_velocity),
        pressure=np.zeros(layout.n_pressure),
        displacement=d,
        curvature=np.zeros(layout.n_trace),
        displacement_geom=d,
    )


def _random_state(disc, rng, t):
    layout = disc.layout
    return State(
        t=t,
        step=1,
        velocity=layout.expand_velocity(0.1 * rng.normal(size=layout.n_free_velocity)),
        pressure=rng.normal(size=layout.n_pressure),
        displacement=0.05 * rng.normal(size=layout.n_trace),
        curvature=rng.normal(size=layout.n_trace),
        displacement_geom=np.zeros(layout.n_trace),
    )


def _flat_stokes_oracle(disc, mu):
    """Dense viscous and divergence blocks assembled point by point on the flat domain."""
    mesh, layout, rule = disc.mesh, disc.layout, disc.rule
    viscous = np.zeros((layout.n_velocity, layout.n_velocity))
    divergence = np.zeros((layout.n_pressure, layout.n_velocity))
    for e in range(mesh.n_triangles):
        coords = mesh.triangle_coords[e]
        area = 0.5 * abs(np.linalg.det(np.column_stack([coords[1] - coords[0], coords[2] - coords[0]])))
        dofs = layout.element_velocity_dofs[e].reshape(2, 4)
        pdofs = layout.tri_vertex_dofs[e]
        for bary, weight in zip(rule.barycentric, rule.weights, strict=True):
            basis = evaluate_basis(coords, bary)
            w = 2.0 * area * weight
            grads = basis.gradients
            for d in range(2):
                for b in range(4):
                    for c in range(2):
                        for a in range(4):
                            value = (d == c) * grads[a] @ grads[b] + grads[a, d] * grads[b, c]
                            viscous[dofs[d, b], dofs[c, a]] += mu * w * value
            for k in range(3):
                for c in range(2):
                    for a in range(4):
                        divergence[pdofs[k], dofs[c, a]] += w * basis.values[k] * grads[a, c]
    return viscous, divergence


def test_flat_geometry_reduces_to_stokes(small_disc):
    n = small_disc.layout.n_trace
    geometry = build_geometry(small_disc.tables, np.zeros(n), np.zeros(n), TAU)
    advection = np.zeros(small_disc.tables.points.shape)
    ops = assemble_fluid_operators(small_disc, geometry, advection, mu=0.1)
    viscous, divergence = _flat_stokes_oracle(small_disc, 0.1)
    assert np.max(np.abs(ops.viscous.toarray() - viscous)) <= 1e-13
    assert np.max(np.abs(ops.divergence.toarray() - divergence)) <= 1e-13
    assert np.allclose(ops.mass.toarray(), ops.mass.toarray().T, atol=1e-15)
    assert ops.mass_rate.count_nonzero() == 0


def test_convection_is_skew_symmetric(small_disc):
    rng = np.random.default_rng(5)
    layout = small_disc.layout
    geometry = build_geometry(
        small_disc.tables, 0.1 * rng.normal(size=layout.n_trace), 0.1 * rng.normal(size=layout.n_trace), TAU,
    )
    advection = rng.normal(size=small_disc.tables.points.shape)
    ops = assemble_fluid_operators(small_disc, geometry, advection, mu=0.1)
    for _ in range(5):
        phi = layout.expand_velocity(rng.normal(size=layout.n_free_velocity))
        assert abs(phi @ (ops.convection @ phi)) <= 1e-12 * (phi @ phi)


def test_assembly_does_not_depend_on_threads(small_mesh, monkeypatch):
    monkeypatch.setattr(assembly, "CHUNK_SIZE", 5)
    rng = np.random.default_rng(6)
    serial = build_discretization(small_mesh, threads=1)
    threaded = build_discretization(small_mesh, threads=3)
    d = 0.1 * rng.normal(size=serial.layout.n_trace)
    advection = rng.normal(size=serial.tables.points.shape)
    ops = [
        assemble_fluid_operators(disc, build_geometry(disc.tables, d, 0.0 * d, TAU), advection, 0.1)
        for disc in (serial, threaded)
    ]
    for name in ("mass", "mass_rate", "convection", "viscous", "divergence"):
        assert np.array_equal(getattr(ops[0], name).toarray(), getattr(ops[1], name).toarray())


def test_zero_data_gives_zero_right_hand_side(small_disc):
    params = PhysicalParams(forcing={"amplitude": 0.0})
    system = assemble_semi_implicit(small_disc, _zero_state(small_disc), params, TAU)
    assert system.size == small_disc.layout.step1_size
    assert np.all(system.rhs == 0.0)
    fields = system.expand(solve(factorize(system.matrix), system.rhs))
    assert all(np.all(values == 0.0) for values in fields.values())


def test_load_vector(small_disc):
    params = PhysicalParams()
    surface = small_disc.surface
    assert np.sum(load_vector(surface, params.forcing, 0.1)) == pytest.approx(0.0, abs=1e-12)
    assert np.any(load_vector(surface, params.forcing, 0.1) != 0.0)
    assert np.all(load_vector(surface, params.forcing, 0.3) == 0.0)


def test_residual_blocks_vanish_at_rest(small_disc):
    params = PhysicalParams(forcing={"amplitude": 0.0})
    rest = _zero_state(small_disc)
    residual = assemble_fully_implicit_residual(small_disc, _zero_state(small_disc, t=TAU), rest, params, TAU)
    layout = small_disc.layout
    assert residual.momentum.shape == (layout.n_free_velocity,)
    assert residual.continuity.shape == (layout.n_pressure,)
    assert residual.curvature.shape == residual.displacement.shape == (layout.n_free_trace,)
    assert residual.norm == 0.0


@pytest.mark.parametrize("structure_bc", ["periodic", "clamped"])
def test_analytic_jacobian_matches_finite_differences(small_mesh, structure_bc):
    disc = build_discretization(small_mesh, structure_bc)
    rng = np.random.default_rng(7)
    params = PhysicalParams(gamma3=0.05)
    previous = _random_state(disc, rng, 0.0)
    guess = _random_state(disc, rng, TAU)
    if structure_bc == "clamped":
        previous = State(**{**vars(previous), "displacement": previous.displacement - previous.displacement[0]})
        guess = State(**{**vars(guess), "displacement": guess.displacement - guess.displacement[0]})
    analytic = assemble_fully_implicit_jacobian(disc, guess, previous, params, TAU, "analytic").toarray()
    fd = assemble_fully_implicit_jacobian(disc, guess, previous, params, TAU, "finite_difference").toarray()
    assert analytic.shape == (disc.layout.newton_size, disc.layout.newton_size)
    assert np.max(np.abs(analytic - fd)) <= 1e-5 * np.max(np.abs(analytic))

    direction = rng.normal(size=analytic.shape[0])
    assert np.linalg.norm(analytic @ direction - fd @ direction) <= 1e-5 * np.linalg.norm(analytic @ direction)


def test_newton_jacobian_at_rest_reduces_to_the_linear_step(small_disc):
    params = PhysicalParams(gamma3=0.05)
    rng = np.random.default_rng(8)
    d = 0.05 * rng.normal(size=small_disc.layout.n_trace)
    rest = _zero_state(small_disc, displacement=d)
    semi = assemble_semi_implicit(small_disc, rest, params, TAU).matrix.toarray()
    jacobian = assemble_fully_implicit_jacobian(
        small_disc, _zero_state(small_disc, t=TAU, displacement=d), rest, params, TAU,
    ).toarray()

    m = semi.shape[0]
    free, _ = newton_free(small_disc.layout)
    assert free.size == m + small_disc.layout.n_free_trace
    # the displacement rows read d - tau xi, eliminate d
    assert np.allclose(jacobian[m:, m:], np.eye(free.size - m))
    reduced = jacobian[:m, :m] - jacobian[:m, m:] @ jacobian[m:, :m]
    assert np.max(np.abs(reduced - semi)) <= 1e-12 * np.max(np.abs(semi))


@pytest.mark.parametrize("structure_bc", ["periodic", "clamped"])
def test_semi_implicit_step_is_affine_in_velocity_and_load(small_mesh, structure_bc, rng):
    disc = build_discretization(small_mesh, structure_bc)
    layout = disc.layout
    d = 0.05 * rng.normal(size=layout.n_trace)
    d_geom = 0.05 * rng.normal(size=layout.n_trace)
    advecting = layout.expand_velocity(0.1 * rng.normal(size=layout.n_free_velocity))

    def linear_step(velocity, amplitude):
        state = State(
            t=0.05,
            step=3,
            velocity=velocity,
            pressure=np.zeros(layout.n_pressure),
            displacement=d,
            curvature=np.zeros(layout.n_trace),
            displacement_geom=d_geom,
        )
        params = PhysicalParams(forcing={"amplitude": amplitude})
        system = assemble_semi_implicit(disc, state, params, TAU, advecting=advecting)
        return system.matrix, solve(factorize(system.matrix), system.rhs)

    for _ in range(3):
        ua, ub = (layout.expand_velocity(rng.normal(size=layout.n_free_velocity)) for _ in range(2))
        load_a, load_b = rng.uniform(-200.0, 200.0, size=2)
        alpha = rng.uniform(-1.0, 2.0)
        matrix_a, xa = linear_step(ua, load_a)
        _, xb = linear_step(ub, load_b)
        matrix_c, xc = linear_step(alpha * ua + (1.0 - alpha) * ub, alpha * load_a + (1.0 - alpha) * load_b)
        assert (matrix_a != matrix_c).nnz == 0
        combined = alpha * xa + (1.0 - alpha) * xb
        assert np.max(np.abs(xc - combined)) <= 1e-11 * max(1.0, np.max(np.abs(combined)))


def test_implicit_residual_at_the_linear_step_shrinks_with_tau(make_config):
    taus = [1e-2, 5e-3, 2.5e-3]
    norms = []
    for tau in taus:
        config = make_config(nx=8, ny=4, tau=tau, final_time=tau, amplitude=0.0)
        disc = build_mesh_for(config)
        previous = initial_state(disc, config, displacement=lambda x: 0.05 * np.sin(np.pi * x))
        linear = step_semi_implicit(previous, StepContext.create(disc, config))
        residual = assemble_fully_implicit_residual(disc, linear, previous, config.physics, tau)
        # the linear step satisfies the plate kinematics and the z equation exactly
        assert np.max(np.abs(residual.displacement)) <= 1e-14
        norms.append(residual.norm)
    assert all(norm > 0.0 for norm in norms)
    assert fit_rate(taus, norms) >= 0.9
