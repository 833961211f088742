import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run long-running checks")
    parser.addoption(
        "--pollution-dir",
        default=None,
        help="directory with the five PM2.5 city CSVs",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_data():
    """A short two-regime synthetic family, windowed for quick training runs."""
    from metatsr.pipeline import prepare
    from metatsr.series import WindowSpec
    from metatsr.synthetic import synth_task_family

    family = synth_task_family(regimes=2, series_count=6, length=1200, seed=0)
    return prepare(family.series, WindowSpec(5, 1), 20)
