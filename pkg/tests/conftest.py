import sys
from pathlib import Path

import pytest

from odrase.ontology import load_ontology, parse_ontology

sys.path.insert(0, str(Path(__file__).parent))

TINY_ONTOLOGY = """
[structures]
s1
s2
s3

[improvements]
i1
i2
i3

[edges]
s1 -> i1
s2 -> i2
s3 -> i3
s3 -> i1
"""


@pytest.fixture(scope="session")
def cfg():
    return load_ontology()


@pytest.fixture(scope="session")
def tiny():
    return parse_ontology(TINY_ONTOLOGY)


# -- acceptance reporting ----------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    if rep.failed:
        _ACCEPTANCE[number] = ("FAIL", title, detail or str(rep.longrepr).splitlines()[-1])
    elif rep.when == "call" and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = ("PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
