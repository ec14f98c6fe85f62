import numpy as np
import pytest

from bathyinv.datagen import PriorConfig, generate_dataset
from bathyinv.fields import BathymetryField, BoundaryConditions, ChannelGeometry, FlowField
from bathyinv.prior import KernelSpec, ParabolicMeanSpec


@pytest.fixture(scope="session")
def small_geometry():
    return ChannelGeometry(n_across=9, n_along=25, dx=16.0, dy=4.0)


@pytest.fixture(scope="session")
def small_prior():
    return PriorConfig("parabolic", KernelSpec(sigma=1.2, len_along=200.0, len_across=20.0), ParabolicMeanSpec(), n_modes=60)


@pytest.fixture(scope="session")
def small_dataset(small_geometry, small_prior):
    ds, _ = generate_dataset(small_geometry, small_prior, 80, seed=11)
    return ds


def random_flow(geometry, seed=0):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.5, 3.0, geometry.shape)
    return FlowField(geometry, rng.normal(1, 0.3, geometry.shape), rng.normal(0, 0.1, geometry.shape), depth, rng.uniform(4, 5, geometry.n_along))


def flat_bathymetry(geometry, level=0.0):
    return BathymetryField(geometry, np.full(geometry.shape, level))


DEFAULT_BC = BoundaryConditions(200.0, 4.5)


@pytest.fixture(scope="session")
def small_sve(small_dataset):
    from bathyinv.rom import TrainHyper
    from bathyinv.sve import SveArchitecture, train_sve

    return train_sve(small_dataset, SveArchitecture(4, (32,), (32,), kl_weight=1e-2), TrainHyper(epochs=15, batch_size=16, seed=1))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(key, passed, detail):
    ACCEPTANCE_LINES[key] = f"{key}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
