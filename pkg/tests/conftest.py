import numpy as np
import pytest

from augment3d.volume import Volume3

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion of the build")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _ACCEPTANCE.append((number, title, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, duration in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title} ({duration:.1f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ramp_x(shape, offset=0.0):
    x = np.arange(shape[0], dtype=np.float32)[:, None, None] - offset
    return Volume3(np.broadcast_to(x, shape).copy())


def smooth_blob(shape, sigma_frac=0.25):
    """Gaussian blob centred in the volume, values in [0, 1]."""
    c = (np.asarray(shape) - 1) / 2.0
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    r2 = sum(((g - ci) / (sigma_frac * n)) ** 2 for g, ci, n in zip(grids, c, shape))
    return Volume3(np.exp(-0.5 * r2).astype(np.float32))
