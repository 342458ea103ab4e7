import pytest
import torch

from crowdcl.dataset import synthesize_dataset

torch.set_num_threads(1)


@pytest.fixture
def tiny_train():
    return synthesize_dataset(16, (2, 12), (32, 32), seed=11)


@pytest.fixture
def tiny_test():
    return synthesize_dataset(6, (2, 12), (32, 32), seed=12, split="test")


# one pass/fail line per acceptance criterion, printed after the run
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
