import numpy as np
import pytest

from libraries.assembly import build_discretization
from libraries.fsi_settings import FsiSettings
from libraries.mesh import build_reference_mesh
from libraries.stepper import SimulationConfig


@pytest.fixture
def rng():
    return np.random.default_rng(FsiSettings().FSI_SEED)


@pytest.fixture
def small_mesh():
    return build_reference_mesh(2.0, 4, 2)


@pytest.fixture
def small_disc(small_mesh):
    return build_discretization(small_mesh)


@pytest.fixture
def make_config():
    def factory(nx=8, ny=4, tau=2.5e-3, final_time=0.025, amplitude=200.0, **update):
        data = {
            "mesh": {"nx": nx, "ny": ny},
            "tau": tau,
            "final_time": final_time,
            "physics": {"forcing": {"amplitude": amplitude}},
            **update,
        }
        return SimulationConfig.model_validate(data)

    return factory
