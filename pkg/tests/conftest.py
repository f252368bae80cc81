import json
import os
from pathlib import Path

import pytest

from policyopt.cost import Catalog, CostParams, TableStats
from policyopt.plan import parse_plan
from policyopt.workload import demo_catalog

# The counting/detection pair over one image column, written as strict JSON.
# The threshold placeholder is filled with 2.
COUNT_OVER_DETECT = json.dumps({
    "Operator": "Object counting(table_3.col_3: how many men are there?: 2)",
    "Left_child": {
        "Operator": "Object detection(table_3.col_3: is there any man?)",
        "Left_child": "Table_3",
        "Right_child": None,
    },
    "Right_child": None,
})

COUNT_ONLY = json.dumps({
    "Operator": "Object counting(table_3.col_3: how many men are there?: 2)",
    "Left_child": "Table_3",
    "Right_child": None,
})


def table3_catalog(rows: int = 1000) -> Catalog:
    return Catalog({"Table_3": TableStats(rows, ("id", "col_3"), {"id"}, {"col_3"})})


def two_table_catalog() -> Catalog:
    return Catalog({
        "A": TableStats(1000, ("k", "x", "img"), {"k"}, {"img"}),
        "B": TableStats(2000, ("k", "y"), set(), set()),
    })


@pytest.fixture
def catalog3():
    return table3_catalog()


@pytest.fixture
def initial3():
    return parse_plan(COUNT_OVER_DETECT)


@pytest.fixture
def optimized3():
    return parse_plan(COUNT_ONLY)


@pytest.fixture
def params():
    return CostParams()


@pytest.fixture
def ab_catalog():
    return two_table_catalog()


@pytest.fixture(scope="session")
def demo():
    return demo_catalog()


GOLDEN_DIR = Path(__file__).parent / "golden"


def assert_golden(name: str, text: str) -> None:
    """Compare ``text`` with a pinned file; set POLICYOPT_UPDATE_GOLDEN=1 to rewrite it."""
    path = GOLDEN_DIR / name
    if os.environ.get("POLICYOPT_UPDATE_GOLDEN") == "1":
        GOLDEN_DIR.mkdir(exist_ok=True)
        path.write_text(text)
    assert path.exists(), f"missing pinned file {path}"
    assert text == path.read_text(), f"{name} differs from the pinned copy"


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
