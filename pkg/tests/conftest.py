import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coral.dataset import Dataset, generate_synthetic
from coral.oracle import SimulatedOracle
from coral.pipeline import pretrain_table

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_world():
    inter, metas, world = generate_synthetic(3, 300, 120, latent_dim=2, n_categories=2, per_user=20, locality=20.0)
    return inter, metas, world


@pytest.fixture(scope="session")
def small_dataset(small_world):
    inter, metas, _ = small_world
    return Dataset.build(inter, metas, seed=0)


@pytest.fixture(scope="session")
def small_oracle(small_world, small_dataset):
    world = small_world[2]
    cats = np.array([world.category_of(i) for i in small_dataset.matrix.item_ids])
    return SimulatedOracle(cats, world_tag="small")


@pytest.fixture(scope="session")
def small_table(small_dataset):
    table, _ = pretrain_table(small_dataset, "mf", d=8, epochs=3, lr=0.01, seed=0)
    return table


# --- acceptance summary -------------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _criteria[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
