import pytest

from reportlabel.gateway import ClientConfig
from reportlabel.mock_server import Rule, RuleTable, serve
from reportlabel.synthetic import rule_table_for


@pytest.fixture(scope="session")
def synthetic_server():
    with serve(rule_table_for()) as server:
        yield server


@pytest.fixture(scope="session")
def metastasis_server():
    table = RuleTable(
        (Rule("metastasis", 0.0, -4.0, "Summary: spinal metastasis present."),),
        default_logits=(-2.0, 0.0),
        default_summary="Summary: no malignancy.",
    )
    with serve(table) as server:
        yield server


@pytest.fixture
def client_config(metastasis_server):
    return ClientConfig(endpoint=metastasis_server.url, retry_limit=2, backoff_base=0.01)


_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, text = marker
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _criteria.get(number, (text, "PASS"))[1]
        _criteria[number] = (text, "FAIL" if failed or prev == "FAIL" else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        text, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {text}")
