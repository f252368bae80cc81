import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policyopt.plan import (
    ColumnRef,
    Join,
    ObjectCounting,
    ObjectDetection,
    OpKind,
    PlanSyntaxError,
    Select,
    SimplePredicate,
    TableScan,
    canonical_key,
    canonicalize,
    join,
    operator_census,
    parse_operator,
    parse_plan,
    referenced_tables,
    scan,
    serialize_plan,
    subtree_tables,
    unary,
)
from policyopt.workload import generate_corpus

LEAF = '{"Operator":"TableScan(T)","Left_child":null,"Right_child":null}'


def census_nonzero(plan):
    return {k: v for k, v in operator_census(plan).items() if v}


def test_single_leaf_parses():
    plan = parse_plan(LEAF)
    assert plan.op == TableScan("T")
    assert plan.left is None and plan.right is None


def test_single_leaf_serializes_to_the_minimal_document():
    assert json.loads(serialize_plan(scan("T"))) == json.loads(LEAF)


def test_select_keeps_written_predicate_order():
    doc = json.dumps({"Operator": "Select(T.a > 5 AND T.b = 'x')",
                      "Left_child": json.loads(LEAF), "Right_child": None})
    op = parse_plan(doc).op
    assert op == Select((SimplePredicate(ColumnRef("T", "a"), ">", 5),
                         SimplePredicate(ColumnRef("T", "b"), "=", "x")))


def test_count_over_detect_fixture_parses(initial3, optimized3):
    assert isinstance(optimized3.op, ObjectCounting)
    assert optimized3.op.object == "men"
    assert optimized3.op.target == ColumnRef("table_3", "col_3")
    assert optimized3.left.op == TableScan("Table_3")
    assert isinstance(initial3.left.op, ObjectDetection)


def test_fixture_census_and_tables(initial3):
    assert census_nonzero(initial3) == {OpKind.OBJECT_COUNTING: 1, OpKind.OBJECT_DETECTION: 1,
                                        OpKind.TABLE_SCAN: 1}
    assert referenced_tables(initial3) == {"Table_3"}


def test_census_of_a_leaf():
    counts = operator_census(scan("T"))
    assert counts[OpKind.TABLE_SCAN] == 1
    assert sum(counts.values()) == 1


def test_subtree_tables_of_join():
    plan = join(ColumnRef("A", "k"), ColumnRef("B", "k"), scan("A"), scan("B"))
    assert subtree_tables(plan) == {"A", "B"}
    assert subtree_tables(plan.left) == {"A"}


@pytest.mark.parametrize("text", [
    "Select(T.a > 5)",
    "Select(T.a >= 5.5 AND T.name = 'it''s')",
    "Join(A.k = B.k)",
    "Object detection(T.img: are there dog AND cat?)",
    "Object counting(T.img: how many dogs are there?: 3)",
    "TableScan(T)",
])
def test_operator_strings_round_trip(text):
    op = parse_operator(text)
    assert parse_operator(str(op)) == op


@pytest.mark.parametrize("text", [
    "Select(T.a > 'x')",       # ordering comparator on a string
    "Select()",
    "Select(T.a > 5) extra",
    "Join(A.k)",
    "Object counting(T.img: how many dogs are there?)",
    "Frobnicate(T)",
])
def test_bad_operator_strings_are_rejected(text):
    with pytest.raises(PlanSyntaxError):
        parse_operator(text)


def _malformed_corpus(seed=11, n=60):
    """Truncated documents and misspelled operator heads; none of them is valid."""
    rng = random.Random(seed)
    good = serialize_plan(join(ColumnRef("A", "k"), ColumnRef("B", "k"),
                               unary(Select((SimplePredicate(ColumnRef("A", "x"), ">", 1),)), scan("A")),
                               scan("B")))
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            out.append(good[:rng.randrange(1, len(good) - 1)])
        else:
            bad = rng.choice(["Selct(", "Select[", "Select((", "Select(A.x >> ", "Select(A.x > 1 AND "])
            out.append(good.replace("Select(A.x > ", bad, 1) if bad.startswith("Select(A") else
                       good.replace("Select(", bad, 1))
    return out


def test_malformed_documents_fail_with_a_location():
    for text in _malformed_corpus():
        with pytest.raises(PlanSyntaxError) as info:
            parse_plan(text)
        assert 0 <= info.value.offset <= len(text.encode())


def test_canonicalize_sorts_predicates():
    sel = Select((SimplePredicate(ColumnRef("T", "b"), "=", 1), SimplePredicate(ColumnRef("T", "a"), "=", 2)))
    out = canonicalize(unary(sel, scan("T")))
    assert [str(p) for p in out.op.predicates] == ["T.a = 2", "T.b = 1"]


def test_canonicalize_orders_join_children_and_keys():
    plan = join(ColumnRef("A", "k"), ColumnRef("B", "k"), scan("B"), scan("A"))
    out = canonicalize(plan)
    assert out.left.op == TableScan("A") and out.right.op == TableScan("B")
    assert out.op == Join(ColumnRef("A", "k"), ColumnRef("B", "k"))


def test_canonicalize_normalizes_object_phrases():
    det = ObjectDetection(ColumnRef("T", "img"), ("  Dog ", "cat"))
    out = canonicalize(unary(det, scan("T")))
    assert out.op.objects == ("cat", "dog")


@pytest.fixture(scope="module")
def corpus(demo):
    return generate_corpus(25, 5, demo)


def test_round_trip_over_generated_plans(corpus):
    for plan in corpus:
        text = serialize_plan(plan)
        assert parse_plan(text) == plan
        assert serialize_plan(parse_plan(text)) == text


def test_canonicalize_idempotent_and_census_preserving(corpus):
    for plan in corpus:
        once = canonicalize(plan)
        assert canonicalize(once) == once
        assert operator_census(once) == operator_census(plan)
        assert canonical_key(plan) == serialize_plan(once)


_ident = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True)
_pred = st.builds(
    SimplePredicate,
    st.builds(ColumnRef, st.sampled_from(["T", "U"]), _ident),
    st.sampled_from(["=", "!=", "<", "<=", ">", ">="]),
    st.integers(-1000, 1000),
)


@settings(max_examples=80, deadline=None)
@given(st.lists(_pred, min_size=1, max_size=4))
def test_select_round_trip_property(preds):
    plan = unary(Select(tuple(preds)), scan("T"))
    assert parse_plan(serialize_plan(plan)) == plan
    assert canonicalize(canonicalize(plan)) == canonicalize(plan)
