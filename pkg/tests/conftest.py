import numpy as np
import pytest

from docfuse.data import SynthConfig, generate_synthetic, load_arrays


@pytest.fixture(scope="session")
def joint40(tmp_path_factory):
    """40-sample joint-mode synthetic set: (docs, images, labels, dataset)."""
    ds = generate_synthetic(SynthConfig(num_samples=40, test_fraction=0.0, seed=0),
                            tmp_path_factory.mktemp("joint40"))
    docs, images, labels = load_arrays(ds.manifest, np.arange(40), 32)
    return docs, images, labels, ds


ACCEPTANCE = pytest.StashKey[list]()
ACCEPTANCE_REPORT = pytest.StashKey[pytest.TestReport]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.stash[ACCEPTANCE_REPORT] = report


@pytest.fixture
def criterion(request):
    """Collects a detail string; one PASS/FAIL line per criterion is printed at the end of the run."""
    marker = request.node.get_closest_marker("criterion")
    details = []
    yield details
    report = request.node.stash.get(ACCEPTANCE_REPORT, None)
    status = "PASS" if report is not None and report.passed else "FAIL"
    number, title = marker.args
    line = f"criterion {number} [{title}]: {status}"
    if details:
        line += " - " + "; ".join(details)
    request.config.stash.setdefault(ACCEPTANCE, []).append((number, line))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
