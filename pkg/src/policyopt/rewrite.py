"""Concrete rewrites for the three optimization policies.

* Movement: cheaper filters run first (deeper in the tree); filters move
  across joins when the receiving side holds every table they read.
* Merge: a Select over a Select on the same table, or a detection over a
  detection on the same column, collapse into one operator.
* Removal: of two adjacent operators on the same target, the one whose
  condition the other already implies is dropped.

Each enumerator returns every single-step rewrite of a plan. Merge and
removal only touch direct parent/child pairs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .cost import Catalog, CostParams
from .monitor import operator_constraints, predicate_implies, visual_implies
from .plan import (
    Join,
    ObjectCounting,
    ObjectDetection,
    Path,
    PlanNode,
    make_node,
    Select,
    canonical_key,
    column_refs,
    format_path,
    iter_nodes,
    node_at,
    replace_at,
    table_keys,
)
from .similarity import PhraseMatcher, as_matcher


class Policy(enum.IntEnum):
    MOVEMENT = 1
    MERGE = 2
    REMOVAL = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class Rewrite:
    policy: Policy
    site: Path
    description: str
    result: PlanNode

    def sort_key(self):
        return (int(self.policy), self.site)


_FILTER_TYPES = (Select, ObjectDetection, ObjectCounting)


def _is_filter(node: Optional[PlanNode]) -> bool:
    return node is not None and isinstance(node.op, _FILTER_TYPES)


def _filter_tables(op) -> set[str]:
    return {ref.key[0] for ref in column_refs(op)}


def _unary_pairs(plan: PlanNode):
    """Yield ``(path, parent, child)`` for every filter directly over a filter."""
    for path, node in iter_nodes(plan):
        if _is_filter(node) and node.right is None and _is_filter(node.left):
            yield path, node, node.left


# ---------------------------------------------------------------------------
# Policy 1


def _chain(node: PlanNode) -> tuple[list, PlanNode]:
    """Split ``node`` into its stack of unary filters (top first) and what lies below."""
    ops = []
    while _is_filter(node) and node.right is None and node.left is not None:
        ops.append(node.op)
        node = node.left
    return ops, node


def _stack(ops: list, base: PlanNode) -> PlanNode:
    for op in reversed(ops):
        base = make_node(op, left=base)
    return base


def _slot_in(ops: list, op, rho) -> list:
    """Insert ``op`` into a filter stack below the lowest costlier filter."""
    for i in range(len(ops) - 1, -1, -1):
        if rho[ops[i].kind] > rho[op.kind]:
            return ops[:i + 1] + [op] + ops[i + 1:]
    return [op] + ops


def _stack_top(plan: PlanNode, path: Path) -> Path:
    """Path of the highest node of the filter stack sitting directly on ``path``."""
    while path and path[-1] == "L":
        parent = node_at(plan, path[:-1])
        if not (_is_filter(parent) and parent.right is None):
            break
        path = path[:-1]
    return path


def _highest_top(plan: PlanNode, path: Path) -> Path:
    """Climb through joins and their filter stacks as far as possible."""
    path = _stack_top(plan, path)
    while path and isinstance(node_at(plan, path[:-1]).op, Join):
        path = _stack_top(plan, path[:-1])
    return path


def _sink(node: PlanNode, op, rho, deep: bool) -> PlanNode:
    """Add filter ``op`` to the stack on ``node``, or as far down joins as it fits."""
    ops, base = _chain(node)
    if deep and isinstance(base.op, Join) and base.left is not None and base.right is not None:
        need = _filter_tables(op)
        if need <= table_keys(base.left):
            return _stack(ops, make_node(base.op, _sink(base.left, op, rho, True), base.right))
        if need <= table_keys(base.right):
            return _stack(ops, make_node(base.op, base.left, _sink(base.right, op, rho, True)))
    return _stack(_slot_in(ops, op, rho), base)


def enumerate_moves(plan: PlanNode, catalog: Optional[Catalog] = None,
                    params: Optional[CostParams] = None) -> list[Rewrite]:
    params = params or CostParams()
    rho = params.rho
    rewrites = []

    for path, parent, child in _unary_pairs(plan):
        if rho[child.kind] > rho[parent.kind]:
            swapped = make_node(child.op, left=make_node(parent.op, left=child.left))
            rewrites.append(Rewrite(
                Policy.MOVEMENT, path,
                f"run {parent.op} before the costlier {child.op} at {format_path(path)}",
                replace_at(plan, path, swapped)))

    # Moves across joins. Filters commute, so any filter in the stack next to
    # a join may cross it, optionally together with the stack neighbours that
    # can follow it, and optionally through further joins in the same
    # direction. A moved filter always lands in the cost-ordered slot of the
    # stack it joins.
    for jpath, j in iter_nodes(plan):
        if not isinstance(j.op, Join) or j.left is None or j.right is None:
            continue
        top = _stack_top(plan, jpath)
        above, _ = _chain(node_at(plan, top))

        for i, op in enumerate(above):
            for side in ("L", "R"):
                branch = j.left if side == "L" else j.right
                fits = table_keys(branch)
                if not _filter_tables(op) <= fits:
                    continue
                group = [i] + [k for k in range(i + 1, len(above)) if _filter_tables(above[k]) <= fits]
                can_sink = isinstance(_chain(branch)[1].op, Join)
                for moving in ([i], group) if len(group) > 1 else ([i],):
                    rest = [o for k, o in enumerate(above) if k not in moving]
                    for deep in (False, True) if can_sink else (False,):
                        landed = branch
                        for k in reversed(moving):
                            landed = _sink(landed, above[k], rho, deep)
                        joined = make_node(j.op, landed, j.right) if side == "L" else make_node(j.op, j.left, landed)
                        what = str(op) if len(moving) == 1 else f"{op} and {len(moving) - 1} filter(s) below it"
                        where = "as deep as possible" if deep else f"into the {'left' if side == 'L' else 'right'} input"
                        rewrites.append(Rewrite(
                            Policy.MOVEMENT, top + ("L",) * i,
                            f"push {what} below {j.op} {where}",
                            replace_at(plan, top, _stack(rest, joined))))

        for side in ("L", "R"):
            ops, base = _chain(j.left if side == "L" else j.right)
            for i, op in enumerate(ops):
                for start in (i, 0) if i else (i,):
                    moving = ops[start:i + 1]
                    kept = _stack(ops[:start] + ops[i + 1:], base)
                    joined = make_node(j.op, kept, j.right) if side == "L" else make_node(j.op, j.left, kept)
                    lifted = replace_at(plan, jpath, joined)
                    highest = _highest_top(lifted, top)
                    for dest in (top, highest) if highest != top else (top,):
                        deep = dest != top
                        stack_ops, below = _chain(node_at(lifted, dest))
                        for o in reversed(moving):
                            stack_ops = _slot_in(stack_ops, o, rho)
                        what = str(op) if len(moving) == 1 else f"{op} and {len(moving) - 1} filter(s) above it"
                        rewrites.append(Rewrite(
                            Policy.MOVEMENT, jpath + (side,) + ("L",) * i,
                            f"pull {what} above {j.op}" + (" as high as possible" if deep else ""),
                            replace_at(lifted, dest, _stack(stack_ops, below))))
    return rewrites


# ---------------------------------------------------------------------------
# Policy 2


def enumerate_merges(plan: PlanNode, backend=None) -> list[Rewrite]:
    matcher = as_matcher(backend)
    rewrites = []
    for path, parent, child in _unary_pairs(plan):
        p, c = parent.op, child.op
        merged = None
        if isinstance(p, Select) and isinstance(c, Select):
            tables = {t.casefold() for t in p.tables() | c.tables()}
            if len(tables) == 1:
                merged = Select(p.predicates + c.predicates)
        elif isinstance(p, ObjectDetection) and isinstance(c, ObjectDetection) \
                and p.target.key == c.target.key:
            objects = list(p.objects)
            for obj in c.objects:
                if not any(matcher.same(obj, kept) for kept in objects):
                    objects.append(obj)
            merged = ObjectDetection(p.target, tuple(objects))
        if merged is not None:
            rewrites.append(Rewrite(
                Policy.MERGE, path, f"merge {p} with {c} into {merged}",
                replace_at(plan, path, make_node(merged, left=child.left))))
    return rewrites


# ---------------------------------------------------------------------------
# Policy 3


def _constraints_implied(strong, weak, matcher: PhraseMatcher) -> bool:
    """Every constraint of operator ``weak`` follows from some constraint of ``strong``."""
    strong_cs, weak_cs = operator_constraints(strong), operator_constraints(weak)
    return all(any(visual_implies(s, w, matcher) for s in strong_cs) for w in weak_cs)


def _prune_select(op: Select, drop: set[int]) -> Optional[Select]:
    kept = tuple(p for i, p in enumerate(op.predicates) if i not in drop)
    return Select(kept) if kept else None


def _looser_indices(strong: tuple, weak: tuple, same_list: bool) -> list[int]:
    """Indices into ``weak`` of predicates implied by another predicate of ``strong``."""
    found = []
    for j, q in enumerate(weak):
        for i, p in enumerate(strong):
            if same_list and i == j:
                continue
            if predicate_implies(p, q):
                # identical twins inside one list: keep the first
                if same_list and predicate_implies(q, p) and j < i:
                    continue
                found.append(j)
                break
    return found


def enumerate_removals(plan: PlanNode, backend=None) -> list[Rewrite]:
    matcher = as_matcher(backend)
    rewrites = []

    def drop_node(path: Path, node: PlanNode) -> PlanNode:
        return replace_at(plan, path, node.left)

    for path, parent, child in _unary_pairs(plan):
        p, c = parent.op, child.op
        if isinstance(p, Select) and isinstance(c, Select):
            for i in _looser_indices(c.predicates, p.predicates, False):
                pruned = _prune_select(p, {i})
                result = replace_at(plan, path, make_node(pruned, left=child)) if pruned else drop_node(path, parent)
                rewrites.append(Rewrite(Policy.REMOVAL, path,
                                        f"drop {p.predicates[i]}, implied by {c}", result))
            for i in _looser_indices(p.predicates, c.predicates, False):
                pruned = _prune_select(c, {i})
                new_child = make_node(pruned, left=child.left) if pruned else child.left
                rewrites.append(Rewrite(Policy.REMOVAL, path + ("L",),
                                        f"drop {c.predicates[i]}, implied by {p}",
                                        replace_at(plan, path, make_node(p, left=new_child))))
            continue
        if not (isinstance(p, (ObjectDetection, ObjectCounting))
                and isinstance(c, (ObjectDetection, ObjectCounting))
                and p.target.key == c.target.key):
            continue
        if _constraints_implied(p, c, matcher):
            # the child is looser: the parent alone filters the same rows
            rewrites.append(Rewrite(Policy.REMOVAL, path + ("L",), f"remove {c}, implied by {p}",
                                    replace_at(plan, path, make_node(p, left=child.left))))
        elif _constraints_implied(c, p, matcher):
            rewrites.append(Rewrite(Policy.REMOVAL, path, f"remove {p}, implied by {c}",
                                    drop_node(path, parent)))

    for path, node in iter_nodes(plan):
        if isinstance(node.op, Select) and len(node.op.predicates) > 1:
            for i in _looser_indices(node.op.predicates, node.op.predicates, True):
                pruned = _prune_select(node.op, {i})
                rewrites.append(Rewrite(Policy.REMOVAL, path,
                                        f"drop {node.op.predicates[i]} from {node.op}",
                                        replace_at(plan, path, make_node(pruned, node.left, node.right))))
    return rewrites


# ---------------------------------------------------------------------------


def keyed_rewrites(plan: PlanNode, catalog: Optional[Catalog] = None, params: Optional[CostParams] = None,
                   backend=None) -> list[tuple[str, Rewrite]]:
    """:func:`all_rewrites` paired with each result's canonical key."""
    matcher = as_matcher(backend)
    found = enumerate_moves(plan, catalog, params) + enumerate_merges(plan, matcher) \
        + enumerate_removals(plan, matcher)
    found.sort(key=Rewrite.sort_key)
    seen = {canonical_key(plan)}
    unique = []
    for rw in found:
        key = canonical_key(rw.result)
        if key not in seen:
            seen.add(key)
            unique.append((key, rw))
    return unique


def all_rewrites(plan: PlanNode, catalog: Optional[Catalog] = None, params: Optional[CostParams] = None,
                 backend=None) -> list[Rewrite]:
    """Every single-step rewrite, deduplicated by canonical form.

    Ordered by policy (movement, merge, removal) and then site path; the
    first rewrite reaching a canonical form wins.
    """
    return [rw for _, rw in keyed_rewrites(plan, catalog, params, backend)]
