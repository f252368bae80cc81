import json

import pytest

from policyopt.cost import (
    Catalog,
    CostParams,
    Ordering,
    TableStats,
    UnknownTableError,
    compare_plans,
    node_cost,
    output_rows,
    plan_cost,
)
from policyopt.plan import ColumnRef, ObjectCounting, ObjectDetection, OpKind, Select, SimplePredicate, join, scan, unary
from policyopt.workload import generate_corpus

ROWS = {"T": 1000, "A": 1000, "B": 2000}
RHO = {"Select": 1, "Join": 5, "ObjectDetection": 100, "ObjectCounting": 200}
ALPHA = {"Select": 0.5, "Join": 0.8, "ObjectDetection": 0.6, "ObjectCounting": 0.3}


def brute(doc, rows=ROWS, rho=RHO, alpha=ALPHA):
    """Independent evaluator over the plain JSON document: (output rows, total cost)."""
    op = doc["Operator"]
    kids = [c for c in (doc["Left_child"], doc["Right_child"]) if c is not None]
    if op.startswith("TableScan("):
        return float(rows[op[len("TableScan("):-1]]), 0.0
    kind = ("Select" if op.startswith("Select(") else "Join" if op.startswith("Join(")
            else "ObjectDetection" if op.startswith("Object detection(") else "ObjectCounting")
    child = [brute(c, rows, rho, alpha) for c in kids]
    n_in = sum(r for r, _ in child)
    return alpha[kind] * n_in, rho[kind] * n_in + sum(c for _, c in child)


def doc_of(plan):
    from policyopt.plan import serialize_plan
    return json.loads(serialize_plan(plan))


@pytest.fixture
def tab():
    return Catalog({
        "T": TableStats(1000, ("a", "img"), image_columns={"img"}),
        "A": TableStats(1000, ("k",)),
        "B": TableStats(2000, ("k",)),
    })


SEL = Select((SimplePredicate(ColumnRef("T", "a"), ">", 5),))
DET = ObjectDetection(ColumnRef("T", "img"), ("dog",))


def test_scan_rows_and_zero_cost(tab, params):
    assert output_rows(scan("T"), tab, params) == 1000
    assert node_cost(scan("T"), tab, params) == 0
    assert plan_cost(scan("T"), tab, params) == 0


def test_select_output_rows(tab, params):
    plan = unary(SEL, scan("T"))
    assert output_rows(plan, tab, params) == pytest.approx(brute(doc_of(plan))[0], abs=1e-9)
    assert output_rows(plan, tab, params) == pytest.approx(500, abs=1e-9)


def test_join_output_rows_sums_inputs(tab, params):
    plan = join(ColumnRef("A", "k"), ColumnRef("B", "k"), scan("A"), scan("B"))
    assert output_rows(plan, tab, params) == pytest.approx(brute(doc_of(plan))[0], abs=1e-9)
    assert output_rows(plan, tab, params) == pytest.approx(2400, abs=1e-9)


def test_node_costs(tab, params):
    assert node_cost(unary(SEL, scan("T")), tab, params) == pytest.approx(1000)
    count = unary(ObjectCounting(ColumnRef("T", "img"), "dog", 1), scan("T"))
    half = Catalog({"T": TableStats(500, ("a", "img"), image_columns={"img"})})
    assert node_cost(count, half, params) == pytest.approx(100000)


def test_two_operator_plan_cost(tab, params):
    plan = unary(DET, unary(SEL, scan("T")))
    assert plan_cost(plan, tab, params) == pytest.approx(brute(doc_of(plan))[1], abs=1e-9)
    assert plan_cost(plan, tab, params) == pytest.approx(51000, abs=1e-9)
    assert plan_cost(plan, tab, params) >= node_cost(plan, tab, params)


def test_unknown_table(params):
    with pytest.raises(UnknownTableError):
        plan_cost(scan("Nope"), Catalog({}), params)


def test_compare(catalog3, initial3, optimized3, params):
    assert compare_plans(initial3, initial3, catalog3, params) is Ordering.EQUAL
    assert compare_plans(optimized3, initial3, catalog3, params) is Ordering.A_CHEAPER
    assert compare_plans(initial3, optimized3, catalog3, params) is Ordering.B_CHEAPER


def test_params_validation():
    with pytest.raises(ValueError):
        CostParams(alpha={**{k: 0.5 for k in ("Select", "Join", "ObjectDetection")}, "ObjectCounting": 0})
    with pytest.raises(ValueError):
        CostParams.from_json({"rho": {"Select": 10}})
    assert CostParams().respects_cost_order


def test_params_json_round_trip(tmp_path):
    p = CostParams.from_json({"alpha": {"Select": 0.25}})
    path = tmp_path / "p.json"
    path.write_text(json.dumps(p.to_json()))
    assert CostParams.load(path) == p
    assert p.alpha[OpKind.SELECT] == 0.25


@pytest.fixture(scope="module")
def plans(demo):
    return generate_corpus(30, 2, demo)


def test_matches_brute_force_on_generated_plans(demo, plans, params):
    rows = {n: t.row_count for n, t in demo.tables.items()}
    rows.update({n.lower(): r for n, r in list(rows.items())})
    for plan in plans:
        assert plan_cost(plan, demo, params) == pytest.approx(brute(doc_of(plan), rows)[1], rel=1e-12)


def test_row_scaling_is_linear(demo, plans, params):
    tripled = demo.scaled(3)
    for plan in plans:
        assert plan_cost(plan, tripled, params) == pytest.approx(3 * plan_cost(plan, demo, params), rel=1e-12)


def test_uniform_params_ignore_operator_kinds(demo, plans):
    flat = CostParams({k: 2.0 for k in RHO}, {k: 1.0 for k in ALPHA})
    rows = {n: t.row_count for n, t in demo.tables.items()}
    for plan in plans:
        doc = doc_of(plan)
        assert plan_cost(plan, demo, flat) == pytest.approx(
            brute(doc, rows, {k: 2.0 for k in RHO}, {k: 1.0 for k in ALPHA})[1])


def test_compare_is_antisymmetric_and_transitive(demo, plans, params):
    sample = plans[:12]
    for a in sample:
        for b in sample:
            ab, ba = compare_plans(a, b, demo, params), compare_plans(b, a, demo, params)
            assert (ab, ba) in {(Ordering.EQUAL, Ordering.EQUAL), (Ordering.A_CHEAPER, Ordering.B_CHEAPER),
                                (Ordering.B_CHEAPER, Ordering.A_CHEAPER)}
    ranked = sorted(sample, key=lambda p: plan_cost(p, demo, params))
    for a, b, c in zip(ranked, ranked[1:], ranked[2:]):
        if compare_plans(a, b, demo, params) is Ordering.A_CHEAPER and \
                compare_plans(b, c, demo, params) is Ordering.A_CHEAPER:
            assert compare_plans(a, c, demo, params) is Ordering.A_CHEAPER
