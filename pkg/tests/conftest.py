import logging

import pytest

from surgeflow.broker import Broker
from surgeflow.service import Engine, EngineConfig
from surgeflow.statestore import StateStore
from surgeflow.wfcore import WorkflowRuntime

logging.getLogger("surgeflow").setLevel(logging.WARNING)

_criteria: dict[str, tuple[int, str]] = {}
_criteria_outcomes: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = getattr(getattr(item, "function", None), "_criterion", None)
        if marker is not None:
            _criteria[item.nodeid] = marker


def pytest_runtest_logreport(report):
    if report.nodeid in _criteria:
        if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
            _criteria_outcomes[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for nodeid, (number, description) in sorted(_criteria.items(), key=lambda kv: kv[1][0]):
        outcome = _criteria_outcomes.get(nodeid, "not run")
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[ACCEPTANCE {number:2d}] {status} - {description}")


@pytest.fixture
def data_dir(tmp_path):
    return tmp_path / "data"


@pytest.fixture
def broker(data_dir):
    b = Broker(data_dir, requeue_delay=0.0)
    yield b
    b.close()


@pytest.fixture
def store(data_dir):
    s = StateStore(data_dir / "state.sqlite3")
    yield s
    s.close()


@pytest.fixture
def runtime(broker, store):
    return WorkflowRuntime(broker, store)


@pytest.fixture
def engine_factory(tmp_path):
    """Build engines with test-friendly timings; everything is stopped at teardown."""
    engines = []

    def make(subdir="engine", *, workers=4, requeue_delay=0.02,
             idle_poll_interval=0.004, clock=None, machines=None) -> Engine:
        kwargs = {
            "data_dir": tmp_path / subdir,
            "workers": workers,
            "requeue_delay": requeue_delay,
            "idle_poll_interval": idle_poll_interval,
        }
        if machines is not None:
            kwargs["machines"] = machines
        engine = Engine(EngineConfig(**kwargs), clock=clock)
        engines.append(engine)
        return engine

    yield make
    for engine in engines:
        engine.stop()
