import csv

import numpy as np
import pytest

from libraries.assembly import PhysicalParams, build_discretization
from libraries.diagnostics import (
    ERROR_COLUMNS,
    ErrorRow,
    ErrorTable,
    energy,
    error_norms,
    fit_rate,
    gcl_residual,
    velocity_difference_l2l2,
    write_agreement_csv,
    write_energy_csv,
    write_error_csv,
)
from libraries.errors import DataError, StructuralError
from libraries.mesh import build_reference_mesh
from libraries.stepper import State, run


def test_fit_rate_examples():
    h = np.array([0.4, 0.2, 0.1, 0.05])
    assert fit_rate(h, 3.0 * h**2) == pytest.approx(2.0)
    assert fit_rate(h, 0.5 * h) == pytest.approx(1.0)


def test_fit_rate_needs_three_positive_points():
    with pytest.raises(DataError):
        fit_rate([0.2, 0.1], [1.0, 0.5])
    with pytest.raises(DataError):
        fit_rate([0.4, 0.2, 0.1], [1.0, 0.0, 0.5])
    with pytest.raises(DataError):
        fit_rate([0.4, 0.2, 0.1], [1.0, 0.5])


def test_fit_rate_leaves_out_the_reference_level():
    h = [0.4, 0.2, 0.1, 0.025]
    errors = [0.4, 0.2, 0.1, 1.0]
    assert fit_rate(h, errors, reference=0.025) == pytest.approx(1.0)
    assert fit_rate(h, errors, reference=0.05) != pytest.approx(1.0)
    with pytest.raises(DataError):
        fit_rate(h[1:], errors[1:], reference=0.025)

    rows = [_row(0.3, tau, tau) for tau in (4e-3, 2e-3, 1e-3)] + [_row(0.3, 2.5e-4, 1.0)]
    table = ErrorTable(axis="tau", rows=rows, reference=2.5e-4)
    assert all(slope == pytest.approx(1.0) for slope in table.fit().values())


def test_elastic_energy_of_a_sine_plate():
    disc = build_discretization(build_reference_mesh(2.0, 16, 4))
    params = PhysicalParams()
    layout = disc.layout
    d = 0.1 * np.sin(np.pi * disc.surface.coordinates)
    state = State(
        t=0.0,
        step=0,
        velocity=np.zeros(layout.n_velocity),
        pressure=np.zeros(layout.n_pressure),
        displacement=d,
        curvature=np.zeros(layout.n_trace),
        displacement_geom=d,
    )
    report = energy(disc, state, params)
    slopes = (np.roll(d, -1) - d) / disc.surface.dx
    assert report.elastic == pytest.approx(0.5 * params.gamma1 * np.sum(slopes**2) * disc.surface.dx, rel=1e-13)
    assert report.fluid_kinetic == report.structure_kinetic == report.bending == 0.0
    assert gcl_residual(disc, state) == 0.0


def test_trajectory_against_itself(make_config):
    traj = run(make_config(nx=4, ny=2, final_time=0.01))
    row = error_norms(traj, traj)
    assert all(getattr(row, name) <= 1e-12 for name in ERROR_COLUMNS)
    assert velocity_difference_l2l2(traj, traj) == 0.0


def test_coarse_against_fine_reference(make_config):
    coarse = run(make_config(nx=4, ny=2, tau=5e-3, final_time=0.02))
    fine = run(make_config(nx=4, ny=2, tau=2.5e-3, final_time=0.02, mesh={"nx": 4, "ny": 2, "refinements": 1}))
    row = error_norms(coarse, fine)
    assert row.tau == 5e-3
    assert row.h == pytest.approx(coarse.disc.mesh.h)
    assert all(getattr(row, name) > 0.0 for name in ERROR_COLUMNS)


def test_non_nested_reference_is_rejected(make_config):
    coarse = run(make_config(nx=4, ny=2, final_time=0.005))
    other = run(make_config(nx=6, ny=3, final_time=0.005))
    with pytest.raises(StructuralError):
        error_norms(coarse, other)


def test_mismatched_time_grids_are_rejected(make_config):
    coarse = run(make_config(nx=4, ny=2, tau=2.5e-3, final_time=0.005))
    other = run(make_config(nx=4, ny=2, tau=2e-3, final_time=0.006))
    with pytest.raises(StructuralError):
        error_norms(coarse, other)


def _row(h, tau, scale):
    return ErrorRow(h=h, tau=tau, **{name: scale * (i + 1) for i, name in enumerate(ERROR_COLUMNS)})


def test_error_table_and_csv(tmp_path):
    table = ErrorTable(axis="tau", rows=[_row(0.3, tau, tau) for tau in (4e-3, 2e-3, 1e-3)])
    slopes = table.fit()
    assert all(slope == pytest.approx(1.0) for slope in slopes.values())
    path = tmp_path / "errors.csv"
    write_error_csv(table, str(path))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["h", "tau", *ERROR_COLUMNS]
    assert len(rows) == 5
    assert rows[-1][:2] == ["slope", "tau"]


def test_energy_and_agreement_csv(tmp_path, make_config):
    traj = run(make_config(nx=4, ny=2, final_time=0.01))
    path = tmp_path / "energy.csv"
    write_energy_csv(traj.energy_reports, str(path))
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4
    assert float(rows[-1]["t"]) == pytest.approx(0.01)
    assert abs(float(rows[-1]["relative_residual"])) <= 1e-10

    agreement = tmp_path / "agreement.csv"
    write_agreement_csv([4e-3, 2e-3, 1e-3], [0.4, 0.2, 0.1], 1.0, str(agreement))
    lines = agreement.read_text().splitlines()
    assert lines[0] == "tau,uDiffL2L2"
    assert lines[-1] == "slope,1.0000"
