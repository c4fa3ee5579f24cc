import numpy as np
import pytest

from swingsafe.casefile import bundled_case, load_case
from swingsafe.netmodel import PowerNetwork


def two_bus(b=1.0, M=(1.0, 1.0), E=(1.0, 1.0), p=(0.0, 0.0), controlled=(0, 1), safety=(0,)):
    return PowerNetwork(2, [(0, 1)], [b], M, E, p, controlled=controlled, safety=safety)


def path_net(n=4, b=None, M=None, E=None, p=None, controlled=None, safety=None):
    edges = [(i, i + 1) for i in range(n - 1)]
    return PowerNetwork(
        n, edges,
        b if b is not None else np.linspace(3.0, 5.0, n - 1),
        M if M is not None else np.linspace(1.0, 2.0, n),
        E if E is not None else np.full(n, 0.2),
        p if p is not None else np.zeros(n),
        controlled=range(n) if controlled is None else controlled,
        safety=(0,) if safety is None else safety,
    )


@pytest.fixture(scope="session")
def case4():
    return load_case(bundled_case("case4"))


# --- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} failed")
    for key, value in item.user_properties:
        if key == "detail" and rep.when == "call":
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        tr.write_line(line)
