import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one summary line per acceptance criterion -----------------------------------

_criteria = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.failed:
        entry = _criteria.setdefault(crit, {"ok": True, "details": [], "title": ""})
        props = dict(report.user_properties)
        entry["title"] = props.get("title", entry["title"])
        entry["ok"] &= report.passed
        if props.get("detail"):
            entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_criteria):
        e = _criteria[crit]
        tag = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"[{crit:>2d}] {tag}  {e['title']}: {'; '.join(e['details'])}")
