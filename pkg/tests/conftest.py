import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossvae import data

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if call.excinfo is None:
        status = "PASS"
    else:
        status = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
        if not detail:
            text = str(call.excinfo.value)
            detail = text.splitlines()[0] if text else call.excinfo.typename
    _CRITERIA[number] = (title, status, detail, call.duration)


def pytest_deselected(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            number, title = marker.args
            hint = "; run with -m reference" if item.get_closest_marker("reference") else ""
            _CRITERIA.setdefault(number, (title, "NOT RUN", "deselected" + hint, 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail, secs = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}  [{secs:.1f}s] {detail}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return record


@pytest.fixture(scope="session")
def lowrank_matrix():
    """200 x 300 grid, rank 5, 20% observed, noise 0.1 (the recovery fixture)."""
    return data.synthetic_low_rank(200, 300, rank=5, density=0.2, noise=0.1, seed=0)


@pytest.fixture(scope="session")
def lowrank_split(lowrank_matrix):
    return data.split(lowrank_matrix, 0)


@pytest.fixture
def small_matrix():
    rng = np.random.default_rng(7)
    cells = rng.choice(12 * 15, size=70, replace=False)
    return data.SparseRatingMatrix(12, 15, cells // 15, cells % 15, rng.uniform(1, 5, size=70).round())
