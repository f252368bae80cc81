"""Binary query plan trees over relational and visual operators.

A plan is a tree of :class:`PlanNode` values. Leaves scan tables; inner nodes
filter (``Select``, ``ObjectDetection``, ``ObjectCounting``) or equi-join
(``Join``). Plans travel as JSON documents whose nodes carry exactly the keys
``Operator``, ``Left_child`` and ``Right_child``; the ``Operator`` value is a
compact operator string such as ``Select(T.a > 5 AND T.b = 'x')``.

Arity is deliberately *not* enforced at construction or parse time. A join
with one child is representable so that the error monitor can diagnose it.
"""

from __future__ import annotations

import enum
import json
import re
import weakref
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional, Union

Literal = Union[int, float, str]
Path = tuple[str, ...]

COMPARATORS = ("=", "!=", "<", "<=", ">", ">=")
ORDERING_COMPARATORS = frozenset({"<", "<=", ">", ">="})

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")
_WS = re.compile(r"\s*")


class OpKind(str, enum.Enum):
    TABLE_SCAN = "TableScan"
    SELECT = "Select"
    JOIN = "Join"
    OBJECT_DETECTION = "ObjectDetection"
    OBJECT_COUNTING = "ObjectCounting"

    def __str__(self) -> str:
        return self.value


FILTER_KINDS = frozenset({OpKind.SELECT, OpKind.OBJECT_DETECTION, OpKind.OBJECT_COUNTING})
VISUAL_KINDS = frozenset({OpKind.OBJECT_DETECTION, OpKind.OBJECT_COUNTING})


class PlanSyntaxError(ValueError):
    """Malformed plan document or operator string.

    ``offset`` is a byte offset into the document (or into the operator
    string when the document position could not be recovered).
    """

    def __init__(self, message: str, offset: int = 0, path: Path = ()):
        self.offset = offset
        self.path = path
        where = format_path(path)
        super().__init__(f"{message} (at byte {offset}, node {where})")


class ArityError(ValueError):
    """The document's node structure cannot be represented as a binary tree."""

    def __init__(self, message: str, path: Path = ()):
        self.path = path
        super().__init__(f"{message} (node {format_path(path)})")


def format_path(path: Path) -> str:
    return "root" if not path else "root." + ".".join(path)


def normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True, order=True)
class ColumnRef:
    table: str
    column: str

    def __post_init__(self):
        for part in (self.table, self.column):
            if not part or not _IDENT.fullmatch(part):
                raise ValueError(f"invalid identifier {part!r}")

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"

    @property
    def key(self) -> tuple[str, str]:
        """Case-insensitive identity; plans may spell one table differently."""
        return self.table.casefold(), self.column.casefold()


def render_literal(value: Literal) -> str:
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    if isinstance(value, bool):
        raise TypeError("boolean literals are not supported")
    return repr(value)


@dataclass(frozen=True)
class SimplePredicate:
    target: ColumnRef
    comparator: str
    value: Literal

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if self.comparator in ORDERING_COMPARATORS and isinstance(self.value, str):
            raise ValueError(f"comparator {self.comparator} needs a numeric value")

    def __str__(self) -> str:
        return f"{self.target} {self.comparator} {render_literal(self.value)}"

    def sort_key(self):
        numeric = not isinstance(self.value, str)
        return (self.target.table, self.target.column, self.comparator,
                (0, self.value, "") if numeric else (1, 0, self.value))


def _memo_str(render):
    """Cache an immutable operator's rendering on the instance."""
    def __str__(self) -> str:
        text = self.__dict__.get("_text")
        if text is None:
            text = render(self)
            object.__setattr__(self, "_text", text)
        return text
    return __str__


@dataclass(frozen=True)
class TableScan:
    table: str
    kind = OpKind.TABLE_SCAN

    @_memo_str
    def __str__(self) -> str:
        return f"TableScan({self.table})"


@dataclass(frozen=True)
class Select:
    predicates: tuple[SimplePredicate, ...]
    kind = OpKind.SELECT

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if not self.predicates:
            raise ValueError("Select needs at least one predicate")

    def tables(self) -> set[str]:
        return {p.target.table for p in self.predicates}

    @_memo_str
    def __str__(self) -> str:
        return "Select(" + " AND ".join(str(p) for p in self.predicates) + ")"


@dataclass(frozen=True)
class Join:
    left_key: ColumnRef
    right_key: ColumnRef
    kind = OpKind.JOIN

    @_memo_str
    def __str__(self) -> str:
        return f"Join({self.left_key} = {self.right_key})"


@dataclass(frozen=True)
class ObjectDetection:
    target: ColumnRef
    objects: tuple[str, ...]
    kind = OpKind.OBJECT_DETECTION

    def __post_init__(self):
        objs = tuple(normalize_phrase(o) for o in self.objects)
        if not objs or not all(objs):
            raise ValueError("ObjectDetection needs non-empty object phrases")
        object.__setattr__(self, "objects", objs)

    @_memo_str
    def __str__(self) -> str:
        return f"Object detection({self.target}: are there {' AND '.join(self.objects)}?)"


@dataclass(frozen=True)
class ObjectCounting:
    target: ColumnRef
    object: str
    threshold: int
    kind = OpKind.OBJECT_COUNTING

    def __post_init__(self):
        obj = normalize_phrase(self.object)
        if not obj:
            raise ValueError("ObjectCounting needs an object phrase")
        object.__setattr__(self, "object", obj)

    @_memo_str
    def __str__(self) -> str:
        return f"Object counting({self.target}: how many {self.object} are there?: {self.threshold})"


Operator = Union[TableScan, Select, Join, ObjectDetection, ObjectCounting]


@dataclass(frozen=True)
class PlanNode:
    op: Operator
    left: Optional["PlanNode"] = None
    right: Optional["PlanNode"] = None

    @property
    def kind(self) -> OpKind:
        return self.op.kind

    def children(self) -> list["PlanNode"]:
        return [c for c in (self.left, self.right) if c is not None]

    def __str__(self) -> str:
        return serialize_plan(self)


_INTERNED: "weakref.WeakValueDictionary" = weakref.WeakValueDictionary()


def make_node(op: Operator, left: Optional[PlanNode] = None, right: Optional[PlanNode] = None) -> PlanNode:
    """A :class:`PlanNode`, shared with any live node built from the same parts.

    Rewrites rebuild the same subtrees over and over; sharing them lets the
    per-node caches (canonical form, table sets) hit across plans. The key
    uses identities, which stay valid because a live node keeps its parts
    alive.
    """
    key = (id(op), id(left), id(right))
    node = _INTERNED.get(key)
    if node is None or node.op is not op or node.left is not left or node.right is not right:
        node = PlanNode(op, left, right)
        _INTERNED[key] = node
    return node


def scan(table: str) -> PlanNode:
    return PlanNode(TableScan(table))


def unary(op: Operator, child: PlanNode) -> PlanNode:
    return PlanNode(op, left=child)


def join(left_key: ColumnRef, right_key: ColumnRef, left: PlanNode, right: PlanNode) -> PlanNode:
    return PlanNode(Join(left_key, right_key), left=left, right=right)


# ---------------------------------------------------------------------------
# traversal helpers


def iter_nodes(plan: PlanNode, path: Path = ()) -> Iterator[tuple[Path, PlanNode]]:
    """Pre-order walk yielding ``(path, node)``; paths are tuples of ``"L"``/``"R"``."""
    yield path, plan
    if plan.left is not None:
        yield from iter_nodes(plan.left, path + ("L",))
    if plan.right is not None:
        yield from iter_nodes(plan.right, path + ("R",))


def node_at(plan: PlanNode, path: Path) -> PlanNode:
    node = plan
    for step in path:
        child = node.left if step == "L" else node.right
        if child is None:
            raise KeyError(f"no node at {format_path(path)}")
        node = child
    return node


def replace_at(plan: PlanNode, path: Path, new: Optional[PlanNode]) -> Optional[PlanNode]:
    if not path:
        return new
    step, rest = path[0], path[1:]
    if step == "L":
        return make_node(plan.op, replace_at(plan.left, rest, new), plan.right)
    return make_node(plan.op, plan.left, replace_at(plan.right, rest, new))


def operator_count(plan: PlanNode) -> int:
    """Number of non-scan operators."""
    return sum(1 for _, n in iter_nodes(plan) if n.kind is not OpKind.TABLE_SCAN)


def operator_census(plan: PlanNode) -> dict[OpKind, int]:
    counts = Counter(node.kind for _, node in iter_nodes(plan))
    return {kind: counts.get(kind, 0) for kind in OpKind}


def subtree_tables(node: Optional[PlanNode]) -> frozenset[str]:
    if node is None:
        return frozenset()
    if isinstance(node.op, TableScan):
        return frozenset({node.op.table})
    found = node.__dict__.get("_tables")
    if found is None:
        found = subtree_tables(node.left) | subtree_tables(node.right)
        object.__setattr__(node, "_tables", found)
    return found


def referenced_tables(plan: PlanNode) -> frozenset[str]:
    return subtree_tables(plan)


def table_keys(node: Optional[PlanNode]) -> frozenset[str]:
    """Case-folded :func:`subtree_tables`."""
    if node is None:
        return frozenset()
    found = node.__dict__.get("_tkeys")
    if found is None:
        found = frozenset(t.casefold() for t in subtree_tables(node))
        object.__setattr__(node, "_tkeys", found)
    return found


def column_refs(op: Operator) -> list[ColumnRef]:
    """Every column an operator reads."""
    if isinstance(op, Select):
        return [p.target for p in op.predicates]
    if isinstance(op, Join):
        return [op.left_key, op.right_key]
    if isinstance(op, (ObjectDetection, ObjectCounting)):
        return [op.target]
    return []


# ---------------------------------------------------------------------------
# operator string grammar


class _OpParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, message: str, pos: Optional[int] = None):
        raise PlanSyntaxError(message, self.pos if pos is None else pos)

    def skip_ws(self):
        self.pos = _WS.match(self.text, self.pos).end()

    def expect(self, token: str):
        self.skip_ws()
        if not self.text.startswith(token, self.pos):
            self.fail(f"expected {token!r}")
        self.pos += len(token)

    def ident(self) -> str:
        self.skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            self.fail("expected identifier")
        self.pos = m.end()
        return m.group()

    def column(self) -> ColumnRef:
        table = self.ident()
        if self.pos >= len(self.text) or self.text[self.pos] != ".":
            self.fail("expected '.' in column reference")
        self.pos += 1
        m = _IDENT.match(self.text, self.pos)
        if not m:
            self.fail("expected column name")
        self.pos = m.end()
        return ColumnRef(table, m.group())

    def comparator(self) -> str:
        self.skip_ws()
        for comp in ("!=", "<=", ">=", "=", "<", ">"):
            if self.text.startswith(comp, self.pos):
                self.pos += len(comp)
                return comp
        self.fail("expected comparator")

    def literal(self) -> Literal:
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] in "'\"":
            quote = self.text[self.pos]
            start = self.pos
            self.pos += 1
            chars = []
            while True:
                if self.pos >= len(self.text):
                    self.fail("unterminated string literal", start)
                ch = self.text[self.pos]
                if ch == quote:
                    if self.text.startswith(quote * 2, self.pos):
                        chars.append(quote)
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(chars)
                chars.append(ch)
                self.pos += 1
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            self.fail("expected literal")
        self.pos = m.end()
        raw = m.group()
        return float(raw) if any(c in raw for c in ".eE") else int(raw)

    def predicate(self) -> SimplePredicate:
        start = self.pos
        target = self.column()
        comp = self.comparator()
        value = self.literal()
        try:
            return SimplePredicate(target, comp, value)
        except ValueError as exc:
            self.fail(str(exc), start)

    def at_and(self) -> bool:
        self.skip_ws()
        m = re.compile(r"AND\b", re.IGNORECASE).match(self.text, self.pos)
        if m:
            self.pos = m.end()
            return True
        return False

    def inner_end(self) -> int:
        """Position of the closing parenthesis, which must end the string."""
        end = self.text.rstrip().rfind(")")
        if end < 0 or self.text[end + 1:].strip():
            self.fail("operator must end with ')'", len(self.text.rstrip()))
        return end


def _strip_articles(phrase: str) -> str:
    return re.sub(r"^(?:any|both|a|an|some|the)\s+", "", phrase.strip())


def _detection_objects(question: str) -> list[str]:
    q = normalize_phrase(question).rstrip("?").strip()
    m = re.fullmatch(r"(?:are|is)\s+there\s+(.*)", q)
    body = m.group(1) if m else q
    body = _strip_articles(body)
    parts = [_strip_articles(p) for p in re.split(r"\s*(?:\band\b|,)\s*", body)]
    return [p for p in parts if p]


def _counting_object(question: str) -> str:
    q = normalize_phrase(question).rstrip("?").strip()
    m = re.fullmatch(r"how\s+many\s+(.*?)(?:\s+(?:are|is)\s+there)?(?:\s+in\s+(?:the|this)\s+\w+)?", q)
    return _strip_articles(m.group(1) if m else q)


def _canonical_name(name: str) -> str:
    return re.sub(r"[\s_]+", "", name).lower()


def parse_operator(text: str) -> Operator:
    """Parse one operator string.

    Bare identifiers (``Table_3``) are read as table scans, matching the
    shorthand used for leaves in hand-written plans.
    """
    p = _OpParser(text)
    p.skip_ws()
    head = re.compile(r"[A-Za-z][A-Za-z _]*?(?=\s*\()").match(text, p.pos)
    if head is None:
        name = p.ident()
        p.skip_ws()
        if p.pos != len(text):
            p.fail("unexpected trailing text")
        return TableScan(name)

    name = _canonical_name(head.group())
    name_pos = p.pos
    p.pos = head.end()
    p.expect("(")
    end = p.inner_end()

    if name == "tablescan":
        table = p.ident()
        p.expect(")")
    elif name == "select":
        preds = [p.predicate()]
        while p.at_and():
            preds.append(p.predicate())
        p.expect(")")
        op = Select(tuple(preds))
        _done(p, end)
        return op
    elif name == "join":
        left = p.column()
        p.expect("=")
        right = p.column()
        p.expect(")")
        _done(p, end)
        return Join(left, right)
    elif name in ("objectdetection", "objectcounting"):
        target = p.column()
        p.expect(":")
        body = text[p.pos:end]
        body_pos = p.pos
        if name == "objectdetection":
            objects = _detection_objects(body)
            if not objects:
                p.fail("detection question names no object", body_pos)
            p.pos = end + 1
            _done(p, end)
            return ObjectDetection(target, tuple(objects))
        question, sep, raw_threshold = body.rpartition(":")
        if not sep:
            p.fail("counting operator needs ': <threshold>'", body_pos)
        m = re.fullmatch(r"\s*<?\s*(-?\d+)\s*>?\s*", raw_threshold)
        if not m:
            p.fail("threshold must be an integer", body_pos + len(question) + 1)
        obj = _counting_object(question)
        if not obj:
            p.fail("counting question names no object", body_pos)
        p.pos = end + 1
        _done(p, end)
        return ObjectCounting(target, obj, int(m.group(1)))
    else:
        p.fail(f"unknown operator {head.group().strip()!r}", name_pos)
    _done(p, end)
    return TableScan(table)


def _done(p: _OpParser, end: int):
    if p.pos != end + 1:
        p.fail("unexpected text before closing ')'")


# ---------------------------------------------------------------------------
# plan documents

_KEYS = ("Operator", "Left_child", "Right_child")


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def parse_plan(text: str) -> PlanNode:
    """Parse a JSON plan document into a :class:`PlanNode`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanSyntaxError(f"malformed JSON: {exc.msg}", _byte_offset(text, exc.pos)) from None
    return plan_from_obj(doc, text)


def plan_from_obj(doc, source: str = "", path: Path = ()) -> PlanNode:
    if isinstance(doc, str):
        # shorthand leaf, e.g. "Left_child": "Table_3"
        return PlanNode(_parse_op_at(doc, source, path))
    if not isinstance(doc, dict):
        raise ArityError(f"plan node must be an object, got {type(doc).__name__}", path)
    extra = set(doc) - set(_KEYS)
    if extra:
        raise PlanSyntaxError(f"unexpected keys {sorted(extra)}", 0, path)
    if "Operator" not in doc or not isinstance(doc["Operator"], str):
        raise ArityError("node lacks an 'Operator' string", path)
    op = _parse_op_at(doc["Operator"], source, path)
    children = []
    for key, step in (("Left_child", "L"), ("Right_child", "R")):
        child = doc.get(key)
        children.append(None if child is None else plan_from_obj(child, source, path + (step,)))
    return PlanNode(op, *children)


def _parse_op_at(op_text: str, source: str, path: Path) -> Operator:
    try:
        return parse_operator(op_text)
    except PlanSyntaxError as exc:
        where = source.find(json.dumps(op_text)[1:-1]) if source else -1
        base = _byte_offset(source, where) if where >= 0 else 0
        inner = len(op_text[:exc.offset].encode("utf-8"))
        message = str(exc).rsplit(" (at byte", 1)[0]
        raise PlanSyntaxError(message, base + inner, path) from None


def plan_to_obj(plan: PlanNode) -> dict:
    return {
        "Operator": str(plan.op),
        "Left_child": None if plan.left is None else plan_to_obj(plan.left),
        "Right_child": None if plan.right is None else plan_to_obj(plan.right),
    }


def serialize_plan(plan: PlanNode, indent: Optional[int] = None) -> str:
    """Deterministic JSON rendering; the inverse of :func:`parse_plan`."""
    return json.dumps(plan_to_obj(plan), indent=indent)


# ---------------------------------------------------------------------------
# canonical form


def _cached(obj, name: str, compute):
    # plan objects are immutable, so derived values can live on the instance
    value = obj.__dict__.get(name)
    if value is None:
        value = compute()
        object.__setattr__(obj, name, value)
    return value


def _canonical_op(op: Operator) -> tuple[Operator, str]:
    """Normalized operator and its JSON-quoted rendering."""
    def compute():
        norm = op
        if isinstance(op, Select):
            norm = Select(tuple(sorted(op.predicates, key=SimplePredicate.sort_key)))
        elif isinstance(op, ObjectDetection):
            norm = ObjectDetection(op.target, tuple(sorted(set(op.objects))))
        return norm, json.dumps(str(norm))
    return _cached(op, "_canon_op", compute)


def _flipped(op: Join) -> Join:
    return _cached(op, "_flip", lambda: Join(op.right_key, op.left_key))


def _canonical(plan: PlanNode) -> tuple[PlanNode, str]:
    # rewrites share unchanged subtrees, so caching per node pays off
    found = plan.__dict__.get("_canon")
    if found is None:
        found = _canonical_uncached(plan)
        object.__setattr__(plan, "_canon", found)
    return found


def _canonical_uncached(plan: PlanNode) -> tuple[PlanNode, str]:
    left, ltext = _canonical(plan.left) if plan.left is not None else (None, "null")
    right, rtext = _canonical(plan.right) if plan.right is not None else (None, "null")
    op = plan.op
    if isinstance(op, Join) and left is not None and right is not None:
        if rtext < ltext:
            left, right, ltext, rtext = right, left, rtext, ltext
            op = _flipped(op)
        lt = table_keys(left)
        if op.left_key.key[0] not in lt and op.right_key.key[0] in lt:
            op = _flipped(op)
    op, quoted = op.__dict__.get("_canon_op") or _canonical_op(op)
    # byte-identical to serialize_plan of the canonical tree
    text = '{"Operator": ' + quoted + ', "Left_child": ' + ltext + ', "Right_child": ' + rtext + "}"
    return PlanNode(op, left, right), text


def canonicalize(plan: PlanNode) -> PlanNode:
    """Normal form used for voting and deduplication.

    Sorts Select predicates and detection objects, and orders join children
    so the lexicographically smaller serialized subtree is on the left.
    """
    return _canonical(plan)[0]


def canonical_key(plan: PlanNode) -> str:
    return _canonical(plan)[1]
