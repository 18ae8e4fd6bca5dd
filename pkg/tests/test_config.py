import pathlib

import pytest

from libraries.config import load_config, parse_config
from libraries.errors import ConfigError

ROOT = pathlib.Path(__file__).resolve().parent.parent


def test_shipped_config_is_the_experiment():
    config = load_config(str(ROOT / "configs" / "default.ini"))
    sim = config.simulation
    assert sim.physics.length == 2.0
    assert (sim.physics.rho_f, sim.physics.rho_s) == (1.0, 1.0)
    assert (sim.physics.gamma1, sim.physics.gamma2, sim.physics.gamma3) == (0.1, 0.1, 0.0)
    assert sim.physics.forcing.amplitude == 200.0
    assert sim.physics.forcing.switch_off == 0.2
    assert sim.final_time == 1.0
    assert sim.n_steps == 400
    assert sim.scheme == "semi_implicit"
    assert sim.ustar == "scheme_r"
    assert config.compare.taus == [4e-3, 2e-3, 1e-3]


def test_solver_keys_are_routed():
    config = parse_config("[solver]\nscheme = fully_implicit\njacobian = finite_difference\nmax_iterations = 7\n")
    assert config.simulation.scheme == "fully_implicit"
    assert config.simulation.newton.jacobian == "finite_difference"
    assert config.simulation.newton.max_iterations == 7


def test_defaults_without_sections():
    config = parse_config("")
    assert config.simulation.tau == 2.5e-3
    assert config.convergence.levels == 4


@pytest.mark.parametrize(
    ("text", "line"),
    [
        ("[time]\ntau = 0.01\nfinal_time = 1.0\n\n[physics]\nmu = 0.1\n[time]\ntau = 2\n", 7),
        ("# comment\n[time]\ntau = -1\n", 3),
        ("[time]\ntau = 0\n", 2),
        ("[mesh]\nnx = 8\nny = 4\nwidth = 3\n", 4),
        ("[mesh]\nnx = 8\n\n[plate]\nstiffness = 1\n", 4),
        ("[convergence]\nlevels = 2\n", 2),
        ("[compare]\ntaus = 1e-3, 2e-3\n", 2),
        ("[solver]\nscheme = explicit\n", 2),
        ("tau = 1\n", 1),
        ("[time]\ntau = 1\ntau = 2\n", 3),
    ],
)
def test_errors_carry_the_line(text, line):
    with pytest.raises(ConfigError) as excinfo:
        parse_config(text)
    assert excinfo.value.line == line
    assert str(excinfo.value).startswith(f"line {line}:")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("does/not/exist.ini")


def test_compare_taus_are_sorted():
    config = parse_config("[compare]\ntaus = 1e-3, 4e-3, 2e-3\n")
    assert config.compare.taus == [4e-3, 2e-3, 1e-3]
