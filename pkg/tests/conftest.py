import pytest

from portbench import reference_catalog_path, reference_machine_path
from portbench.catalog import load_catalog
from portbench.machine import load_machine
from portbench.measure import MeasurementConfig, SimulatorBackend


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(reference_catalog_path())


@pytest.fixture(scope="session")
def machine(catalog):
    return load_machine(reference_machine_path(), catalog=catalog)


@pytest.fixture(scope="session")
def backend(machine):
    return SimulatorBackend(machine)


@pytest.fixture(scope="session")
def fast_config():
    # exact on the deterministic simulator; the protocol cancels the size
    # difference, so small runs give the same per-iteration values
    return MeasurementConfig(n_small=2, n_large=12, repetitions=1)
