from __future__ import annotations

import pytest

from gridbank.clock import ManualClock
from gridbank.instruments import InstrumentBook
from gridbank.ledger import Ledger
from gridbank.money import Money
from gridbank.security import generate_identity

_acceptance_results: dict[int, list[tuple[str, str]]] = {}


def G(value) -> Money:
    return Money.of(value)


@pytest.fixture
def clock():
    return ManualClock("2026-03-01T12:00:00Z")


@pytest.fixture
def ledger(clock):
    return Ledger(clock=clock)


@pytest.fixture
def bank_identity():
    return generate_identity("CN=GridBank,O=Grid")


@pytest.fixture
def book(ledger, bank_identity):
    return InstrumentBook(ledger, bank_identity, endpoint="bank.grid:5000",
                          entropy=lambda n: bytes(range(n)))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n = getattr(report, "acceptance_n", None)
    if n is None:
        return
    _acceptance_results.setdefault(n, []).append((report.nodeid, report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep.acceptance_n = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_results):
        outcomes = _acceptance_results[n]
        ok = all(o == "passed" for _, o in outcomes)
        name = outcomes[0][0].split("::")[-1]
        terminalreporter.write_line(
            f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({len(outcomes)} test(s), e.g. {name})")


ALICE = "CN=Alice,O=Consumers"
GSP_A = "CN=GSP-A,O=Providers"
GSP_RATES = {"cpu": "3.6", "memory": "0.002", "network": "0.01"}


@pytest.fixture
def grid(tmp_path):
    """A bank, one consumer with 100 G$ and one provider with a four-account pool."""
    from gridbank.harness import Grid

    g = Grid(seed=1)
    g.add_participant(ALICE, "100")
    g.add_participant(GSP_A, "0")
    g.add_provider({"subject": GSP_A, "rates": GSP_RATES, "pool_size": 4,
                    "mapfile": str(tmp_path / "grid-mapfile"),
                    "description": {"cpu_count": 4, "cpu_speed_ghz": "2.4", "memory_mb": 8192,
                                    "storage_gb": 500, "bandwidth_mbps": "1000"}})
    g.add_consumer({"subject": ALICE, "budget": "100"})
    return g
