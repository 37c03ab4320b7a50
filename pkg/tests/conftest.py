import os

import pytest

from knowflow.memory import MemoryStore
from knowflow.pkb import load_goal, load_library
from knowflow.schema import PredicateAtom, ToolRegistry, ToolSchema, load_registry
from knowflow.simenv import load_environment, load_planner_script

DATA = os.path.join(os.path.dirname(__file__), os.pardir, "src", "knowflow", "data")


def data_path(name):
    return os.path.abspath(os.path.join(DATA, name))


def atom(text):
    return PredicateAtom.parse(text)


def tool(name, pre=(), add=(), delete=(), params=(), category="atomic"):
    return ToolSchema(
        name,
        category,
        tuple(params),
        frozenset(atom(a) for a in pre),
        frozenset(atom(a) for a in add),
        frozenset(atom(a) for a in delete),
    )


@pytest.fixture(scope="session")
def registry():
    return load_registry(data_path("tools.json"))


@pytest.fixture(scope="session")
def library():
    return load_library(data_path("library.json"))


@pytest.fixture
def env():
    return load_environment(data_path("environment.json"))


@pytest.fixture(scope="session")
def planner():
    return load_planner_script(data_path("planner.json"))


@pytest.fixture(scope="session")
def ship_goal():
    return load_goal(data_path("goal.json"))


@pytest.fixture
def store():
    return MemoryStore()


@pytest.fixture
def chain_registry():
    """load -> correct -> detect, plus a despeckle step and an alternative detector."""
    return ToolRegistry(
        [
            tool("load", add=["loaded(raster)"]),
            tool("correct", pre=["loaded(raster)"], add=["corrected(raster)"]),
            tool("despeckle", pre=["loaded(raster)"], add=["speckle_free(raster)"]),
            tool("detect", pre=["corrected(raster)"], add=["detected(objects)"], category="semantic"),
        ]
    )


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" in report.nodeid and report.when == "call":
        _CRITERIA[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py::test_criterion_" in report.nodeid and report.failed:
        _CRITERIA[report.nodeid.split("::")[-1]] = "failed"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        verdict = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
