"""Validity checks for candidate plans.

A candidate is valid when it is structurally sound against the catalog and
equivalent to the initial plan. Equivalence is decided over the plans'
constraint sets: referenced tables, equi-join key pairs, relational
predicates and visual constraints, each side required to imply the other.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

from .cost import Catalog
from .plan import (
    ArityError,
    ColumnRef,
    Join,
    ObjectCounting,
    ObjectDetection,
    Path,
    PlanNode,
    PlanSyntaxError,
    Select,
    SimplePredicate,
    TableScan,
    column_refs,
    format_path,
    iter_nodes,
    parse_plan,
    table_keys,
)
from .similarity import PhraseMatcher, as_matcher


class ErrorKind(str, enum.Enum):
    ARITY = "Arity"
    UNKNOWN_TABLE = "UnknownTable"
    UNKNOWN_COLUMN = "UnknownColumn"
    PREDICATE_SCOPE = "PredicateScope"
    NON_IMAGE_COLUMN = "NonImageColumn"
    NEGATIVE_THRESHOLD = "NegativeThreshold"
    LEAF_NOT_SCAN = "LeafNotScan"
    UNPARSEABLE = "Unparseable"
    INEQUIVALENT = "Inequivalent"


STRUCTURAL_KINDS = tuple(k for k in ErrorKind if k is not ErrorKind.INEQUIVALENT)


@dataclass(frozen=True)
class PlanError:
    kind: ErrorKind
    location: Optional[Path]
    detail: str

    def __str__(self) -> str:
        where = "" if self.location is None else f" at {format_path(self.location)}"
        return f"{self.kind.value}{where}: {self.detail}"


def check_structure(plan: PlanNode, catalog: Catalog) -> list[PlanError]:
    """Pattern-match every node against the known structural defects."""
    errors: list[PlanError] = []

    def add(kind, path, detail):
        errors.append(PlanError(kind, path, detail))

    for path, node in iter_nodes(plan):
        op = node.op
        n_children = len(node.children())

        if isinstance(op, TableScan):
            if n_children:
                add(ErrorKind.ARITY, path, f"scan of {op.table} has {n_children} children")
            if op.table not in catalog:
                add(ErrorKind.UNKNOWN_TABLE, path, f"table {op.table} does not exist")
            continue

        if isinstance(op, Join):
            if node.left is None or node.right is None:
                add(ErrorKind.ARITY, path, f"join has {n_children} child(ren), needs 2")
        elif node.left is None or node.right is not None:
            add(ErrorKind.ARITY, path, f"{op.kind.value} needs exactly one (left) child")
        if n_children == 0:
            add(ErrorKind.LEAF_NOT_SCAN, path, f"leaf is {op.kind.value}, not a table scan")

        known_refs = []
        for ref in column_refs(op):
            if ref.table not in catalog:
                add(ErrorKind.UNKNOWN_TABLE, path, f"{ref} refers to unknown table {ref.table}")
            elif catalog.stats(ref.table).column(ref.column) is None:
                add(ErrorKind.UNKNOWN_COLUMN, path, f"column {ref} does not exist")
            else:
                known_refs.append(ref)

        if isinstance(op, Join):
            lt, rt = table_keys(node.left), table_keys(node.right)
            lk, rk = op.left_key.key[0], op.right_key.key[0]
            if not ((lk in lt and rk in rt) or (lk in rt and rk in lt)):
                add(ErrorKind.PREDICATE_SCOPE, path,
                    f"join keys {op.left_key}, {op.right_key} do not span both inputs")
        else:
            visible = table_keys(node)
            for ref in column_refs(op):
                if ref.key[0] not in visible:
                    add(ErrorKind.PREDICATE_SCOPE, path,
                        f"{ref} refers to table {ref.table} absent from the subtree")

        if isinstance(op, (ObjectDetection, ObjectCounting)):
            for ref in known_refs:
                if not catalog.stats(ref.table).is_image(ref.column):
                    add(ErrorKind.NON_IMAGE_COLUMN, path, f"{ref} is not an image column")
        if isinstance(op, ObjectCounting) and op.threshold < 0:
            add(ErrorKind.NEGATIVE_THRESHOLD, path, f"threshold {op.threshold} is negative")
    return errors


# ---------------------------------------------------------------------------
# implication between simple predicates


def predicate_holds(pred: SimplePredicate, value) -> bool:
    """Evaluate ``pred`` against a single column value."""
    v = pred.value
    if isinstance(v, str) != isinstance(value, str):
        return pred.comparator == "!="
    comp = pred.comparator
    if comp == "=":
        return value == v
    if comp == "!=":
        return value != v
    if comp == "<":
        return value < v
    if comp == "<=":
        return value <= v
    if comp == ">":
        return value > v
    return value >= v


def predicate_implies(p: SimplePredicate, q: SimplePredicate) -> bool:
    """True when every value satisfying ``p`` satisfies ``q`` (sound, not complete)."""
    if p.target.key != q.target.key:
        return False
    if p.comparator == q.comparator and p.value == q.value:
        return True
    a, b = p.value, q.value
    if p.comparator == "=":
        return predicate_holds(q, a)
    if isinstance(a, str) or isinstance(b, str):
        return False
    lower = {">", ">="}
    upper = {"<", "<="}
    if p.comparator in lower and q.comparator in lower:
        if p.comparator == ">=" and q.comparator == ">":
            return a > b
        return a >= b
    if p.comparator in upper and q.comparator in upper:
        if p.comparator == "<=" and q.comparator == "<":
            return a < b
        return a <= b
    return False


# ---------------------------------------------------------------------------
# visual constraints


@dataclass(frozen=True)
class Detects:
    target: ColumnRef
    object: str

    def __str__(self) -> str:
        return f"detect {self.object!r} in {self.target}"


@dataclass(frozen=True)
class Counts:
    target: ColumnRef
    object: str
    threshold: int

    def __str__(self) -> str:
        return f"count {self.object!r} in {self.target} > {self.threshold}"


VisualConstraint = Union[Detects, Counts]


def visual_implies(c: VisualConstraint, d: VisualConstraint, matcher: PhraseMatcher) -> bool:
    """Counting implies detection and any looser counting of the same object."""
    if c.target.key != d.target.key or not matcher.same(c.object, d.object):
        return False
    if isinstance(d, Detects):
        return True
    return isinstance(c, Counts) and c.threshold >= d.threshold


def _fold(ref: ColumnRef) -> ColumnRef:
    return ColumnRef(*ref.key)


def operator_constraints(op) -> list:
    """Constraints an operator enforces, with identifiers case-folded."""
    if isinstance(op, Select):
        return [SimplePredicate(_fold(p.target), p.comparator, p.value) for p in op.predicates]
    if isinstance(op, ObjectDetection):
        return [Detects(_fold(op.target), o) for o in op.objects]
    if isinstance(op, ObjectCounting):
        return [Counts(_fold(op.target), op.object, op.threshold)]
    return []


@dataclass
class ConstraintSet:
    tables: frozenset[str]
    joins: Counter
    predicates: list[SimplePredicate]
    visual: list[VisualConstraint]

    @classmethod
    def of(cls, plan: PlanNode) -> "ConstraintSet":
        joins: Counter = Counter()
        predicates, visual = [], []
        for _, node in iter_nodes(plan):
            op = node.op
            if isinstance(op, Join):
                joins[frozenset((_fold(op.left_key), _fold(op.right_key)))] += 1
            elif isinstance(op, Select):
                predicates.extend(operator_constraints(op))
            else:
                visual.extend(operator_constraints(op))
        return cls(table_keys(plan), joins, predicates, visual)


def _first_unimplied(needed, available, implies) -> Optional[object]:
    for item in needed:
        if not any(implies(have, item) for have in available):
            return item
    return None


def check_equivalence(initial: PlanNode, candidate: PlanNode, catalog: Optional[Catalog] = None,
                      backend=None) -> list[PlanError]:
    """Empty when ``candidate`` enforces exactly the constraints of ``initial``.

    A constraint may be missing from the candidate when a retained one
    implies it; a candidate constraint not implied by the initial plan makes
    the result strictly stronger and is rejected.
    """
    matcher = as_matcher(backend)
    want, got = ConstraintSet.of(initial), ConstraintSet.of(candidate)

    def inequivalent(detail):
        return [PlanError(ErrorKind.INEQUIVALENT, None, detail)]

    if want.tables != got.tables:
        missing = sorted(want.tables ^ got.tables)
        return inequivalent(f"referenced tables differ: {', '.join(missing)}")
    if want.joins != got.joins:
        diff = (want.joins - got.joins) or (got.joins - want.joins)
        pair = sorted(str(k) for k in next(iter(diff)))
        return inequivalent(f"join on {' = '.join(pair)} is not matched")

    miss = _first_unimplied(want.predicates, got.predicates, predicate_implies)
    if miss is not None:
        return inequivalent(f"predicate {miss} is not enforced")
    extra = _first_unimplied(got.predicates, want.predicates, predicate_implies)
    if extra is not None:
        return inequivalent(f"predicate {extra} is not in the initial plan")

    implies = lambda c, d: visual_implies(c, d, matcher)  # noqa: E731
    miss = _first_unimplied(want.visual, got.visual, implies)
    if miss is not None:
        return inequivalent(f"visual constraint ({miss}) is not enforced")
    extra = _first_unimplied(got.visual, want.visual, implies)
    if extra is not None:
        return inequivalent(f"visual constraint ({extra}) is not in the initial plan")
    return []


def check_error(candidate: Union[str, PlanNode], initial: PlanNode, catalog: Catalog,
                backend=None) -> list[PlanError]:
    """All errors of a candidate; empty means the plan is valid.

    Equivalence is only examined once the structure is clean.
    """
    if isinstance(candidate, str):
        try:
            candidate = parse_plan(candidate)
        except (PlanSyntaxError, ArityError) as exc:
            return [PlanError(ErrorKind.UNPARSEABLE, None, str(exc))]
    errors = check_structure(candidate, catalog)
    if errors:
        return errors
    return check_equivalence(initial, candidate, catalog, backend)
