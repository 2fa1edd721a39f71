import time

import numpy as np
import pytest

from tempomamba.numerics import make_rng

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.fixture
def rng():
    return make_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The default 500-step toy training run, shared by every test that needs a trained model."""
    from tempomamba import toy_diffusion as td

    out = tmp_path_factory.mktemp("train")
    config = td.TrainConfig()
    start = time.perf_counter()
    result = td.train(config, out_dir=out)
    result.seconds = time.perf_counter() - start
    return result, out


@pytest.fixture
def measured(request):
    """Tests attach a one-line measurement summary to their criterion line."""
    def record(text):
        request.node.user_properties.append(("measured", text))
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "measured")
    _CRITERIA[n] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
