import pytest
import torch

from makeup_prior.backends import make_toy_suite
from makeup_prior.pipeline import Backends

_CRITERIA = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    # a criterion passes only if every phase of every test tagged with it passes
    ok = report.passed or (report.when != "call" and not report.failed)
    prev = _CRITERIA.get(crit, True)
    _CRITERIA[crit] = prev and ok
    if report.when == "call":
        _DETAILS.setdefault(crit, []).extend(v for k, v in report.user_properties if k == "detail")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = (int(mark.args[0]), str(mark.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), ok in sorted(_CRITERIA.items()):
        detail = "; ".join(_DETAILS.get((num, title), []))
        line = f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)


@pytest.fixture(scope="session")
def suite():
    return make_toy_suite(0, vit_patch=8)


@pytest.fixture(scope="session")
def backends(suite):
    return Backends.from_toy(suite)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
