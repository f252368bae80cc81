"""Random query workloads, simulated execution and optimization metrics.

Execution is simulated: a plan's "true" time follows the same row-flow
arithmetic as the cost model but with its own per-operator factors. In
matched mode those factors equal the estimator's parameters, so simulated
time and estimated cost coincide exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

from .cost import COST_ORDER, Catalog, CostParams, TableStats, plan_cost
from .monitor import check_error, check_structure
from .plan import (
    ColumnRef,
    ObjectCounting,
    ObjectDetection,
    OpKind,
    PlanNode,
    Select,
    SimplePredicate,
    TableScan,
    canonical_key,
    iter_nodes,
    join,
    node_at,
    operator_census,
    operator_count,
    parse_plan,
    replace_at,
    scan,
    serialize_plan,
    table_keys,
)
from .similarity import as_matcher

OBJECT_VOCABULARY = ("person", "man", "woman", "dog", "cat", "car", "horse", "bird", "tree", "boat")
COMPARATOR_CHOICES = (">", ">=", "<", "<=", "=", "!=")


class GenerationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorLimits:
    max_joins: int = 3
    max_selects: int = 3
    max_detections: int = 2
    max_countings: int = 2
    min_one_of_each: bool = True
    min_operators: int = 5
    max_est_cost: float = 1e9
    max_attempts: int = 200
    # "stacked": every filter above the join tree, as a naive translation
    # emits them; "scattered": each filter at a random legal position
    placement: str = "stacked"

    def __post_init__(self):
        if self.placement not in ("stacked", "scattered"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.min_one_of_each and min(self.max_joins, self.max_selects,
                                        self.max_detections, self.max_countings) < 1:
            raise ValueError("every maximum must be at least 1 when one of each is required")

    def caps(self) -> dict[OpKind, int]:
        return {
            OpKind.JOIN: self.max_joins,
            OpKind.SELECT: self.max_selects,
            OpKind.OBJECT_DETECTION: self.max_detections,
            OpKind.OBJECT_COUNTING: self.max_countings,
        }


def demo_catalog() -> Catalog:
    """A small art-collection schema: four joinable tables, three with images."""
    return Catalog({
        "artworks": TableStats(5000, ("id", "artist_id", "year", "price", "img"),
                               {"id"}, {"img"}),
        "artists": TableStats(800, ("artist_id", "birth_year", "works", "portrait"),
                              {"artist_id"}, {"portrait"}),
        "exhibitions": TableStats(2000, ("exhibit_id", "artist_id", "museum_id", "year", "visitors"),
                                  {"exhibit_id"}),
        "museums": TableStats(300, ("museum_id", "capacity", "rating", "photo"),
                              {"museum_id"}, {"photo"}),
    })


def join_edges(catalog: Catalog) -> dict[tuple[str, str], list[str]]:
    """Table pairs sharing a non-image column name, with the shared columns."""
    names = sorted(catalog.tables)
    edges = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            ta, tb = catalog.tables[a], catalog.tables[b]
            shared = sorted((set(ta.columns) - ta.image_columns) & (set(tb.columns) - tb.image_columns))
            if shared:
                edges[(a, b)] = shared
    return edges


class _Builder:
    def __init__(self, rng: random.Random, catalog: Catalog, limits: GeneratorLimits):
        self.rng = rng
        self.catalog = catalog
        self.limits = limits
        self.edges = join_edges(catalog)

    def join_tree(self) -> PlanNode:
        rng = self.rng
        image_tables = sorted(t for t, s in self.catalog.tables.items() if s.image_columns)
        want = rng.randint(1, self.limits.max_joins)
        chosen = [rng.choice(image_tables)]
        tree = scan(chosen[0])
        while len(chosen) < want + 1:
            frontier = []
            for (a, b), cols in sorted(self.edges.items()):
                if (a in chosen) != (b in chosen):
                    inner, outer = (a, b) if a in chosen else (b, a)
                    frontier.extend((inner, outer, c) for c in cols)
            if not frontier:
                break
            inner, outer, col = rng.choice(frontier)
            chosen.append(outer)
            if rng.random() < 0.5:
                tree = join(ColumnRef(inner, col), ColumnRef(outer, col), tree, scan(outer))
            else:
                tree = join(ColumnRef(outer, col), ColumnRef(inner, col), scan(outer), tree)
        return tree

    def insert(self, plan: PlanNode, op, table: str) -> PlanNode:
        key = table.casefold()
        sites = [path for path, node in iter_nodes(plan) if key in table_keys(node)]
        path = self.rng.choice(sites)
        node = node_at(plan, path)
        return replace_at(plan, path, PlanNode(op, left=node))

    def plain_columns(self, table: str) -> list[str]:
        stats = self.catalog.tables[table]
        return [c for c in stats.columns if c not in stats.image_columns]

    def select(self, tables: list[str], used: list[SimplePredicate]) -> tuple[Select, str]:
        rng = self.rng
        preds = []
        if used and rng.random() < 0.35:
            # same column again, so removals have something to find
            base = rng.choice(used)
            table = base.target.table
            comp = base.comparator if base.comparator in (">", ">=", "<", "<=") else rng.choice(COMPARATOR_CHOICES)
            preds.append(SimplePredicate(base.target, comp, rng.randint(0, 100)))
        else:
            table = rng.choice(tables)
        n = 1 if preds or rng.random() < 0.7 else 2
        while len(preds) < n:
            col = rng.choice(self.plain_columns(table))
            preds.append(SimplePredicate(ColumnRef(table, col), rng.choice(COMPARATOR_CHOICES),
                                         rng.randint(0, 100)))
        return Select(tuple(preds)), table

    def image_target(self, tables: list[str]) -> ColumnRef:
        options = [(t, c) for t in tables for c in sorted(self.catalog.tables[t].image_columns)]
        return ColumnRef(*self.rng.choice(options))

    def build(self) -> PlanNode:
        rng, lim = self.rng, self.limits
        plan = self.join_tree()
        tables = sorted(t.op.table for _, t in iter_nodes(plan) if isinstance(t.op, TableScan))
        image_tables = [t for t in tables if self.catalog.tables[t].image_columns]
        used_preds: list[SimplePredicate] = []
        seen_objects: dict[ColumnRef, list[str]] = {}

        def pick_object(target: ColumnRef) -> str:
            prior = seen_objects.get(target)
            if prior and rng.random() < 0.5:
                return rng.choice(prior)
            return rng.choice(OBJECT_VOCABULARY)

        filters = []
        for _ in range(rng.randint(1, lim.max_selects)):
            op, table = self.select(tables, used_preds)
            used_preds.extend(op.predicates)
            filters.append((op, table))
        for _ in range(rng.randint(1, lim.max_detections)):
            target = self.image_target(image_tables)
            objs = [pick_object(target)]
            if rng.random() < 0.2:
                objs.append(rng.choice(OBJECT_VOCABULARY))
            seen_objects.setdefault(target, []).extend(objs)
            filters.append((ObjectDetection(target, tuple(dict.fromkeys(objs))), target.table))
        for _ in range(rng.randint(1, lim.max_countings)):
            target = self.image_target(image_tables)
            obj = pick_object(target)
            seen_objects.setdefault(target, []).append(obj)
            filters.append((ObjectCounting(target, obj, rng.randint(0, 4)), target.table))
        rng.shuffle(filters)
        for op, table in filters:
            if lim.placement == "stacked":
                plan = PlanNode(op, left=plan)
            else:
                plan = self.insert(plan, op, table)
        return plan


def _within_limits(plan: PlanNode, limits: GeneratorLimits) -> bool:
    census = operator_census(plan)
    for kind, cap in limits.caps().items():
        if census[kind] > cap or (limits.min_one_of_each and census[kind] < 1):
            return False
    return True


def generate_query(seed: int, catalog: Catalog, limits: Optional[GeneratorLimits] = None,
                   params: Optional[CostParams] = None) -> PlanNode:
    """A random valid multi-modal plan, deterministic in ``seed``.

    Candidates that are too shallow or too expensive are redrawn, up to
    ``limits.max_attempts`` times.
    """
    limits = limits or GeneratorLimits()
    params = params or CostParams()
    if len(join_edges(catalog)) < 1 or not any(t.image_columns for t in catalog.tables.values()):
        raise ValueError("catalog needs two joinable tables and an image column")
    rng = random.Random(seed)
    builder = _Builder(rng, catalog, limits)
    for _ in range(limits.max_attempts):
        plan = builder.build()
        if (operator_count(plan) >= limits.min_operators
                and _within_limits(plan, limits)
                and plan_cost(plan, catalog, params) <= limits.max_est_cost
                and not check_structure(plan, catalog)):
            return plan
    raise GenerationExhausted(f"no acceptable query after {limits.max_attempts} attempts (seed {seed})")


def generate_corpus(n: int, seed: int, catalog: Catalog, limits: Optional[GeneratorLimits] = None,
                    params: Optional[CostParams] = None, max_draws: Optional[int] = None) -> list[PlanNode]:
    """``n`` queries with pairwise distinct canonical forms."""
    master = random.Random(seed)
    plans, keys = [], set()
    draws = 0
    max_draws = max_draws or 20 * n + 20
    while len(plans) < n:
        if draws >= max_draws:
            raise GenerationExhausted(f"only {len(plans)} distinct queries after {draws} draws")
        draws += 1
        plan = generate_query(master.getrandbits(32), catalog, limits, params)
        key = canonical_key(plan)
        if key not in keys:
            keys.add(key)
            plans.append(plan)
    return plans


# ---------------------------------------------------------------------------
# simulated execution


def _unit(seed: int, *parts) -> float:
    return random.Random("|".join([str(seed), *map(str, parts)])).random()


@dataclass(frozen=True)
class SimProfile:
    """Ground-truth execution parameters.

    Unmatched profiles perturb each operator kind's per-row cost and give
    every predicate, object and join its own selectivity, keyed by content
    so an operator keeps its selectivity wherever it moves.
    """

    params: CostParams = field(default_factory=CostParams)
    matched_mode: bool = True
    seed: int = 0
    spread: float = 0.5

    @classmethod
    def matched(cls, params: Optional[CostParams] = None) -> "SimProfile":
        return cls(params or CostParams(), True)

    @classmethod
    def unmatched(cls, seed: int, params: Optional[CostParams] = None, spread: float = 0.5) -> "SimProfile":
        return cls(params or CostParams(), False, seed, spread)

    def true_rho(self, kind: OpKind) -> float:
        base = self.params.rho[kind]
        if self.matched_mode:
            return base
        z = random.Random(f"{self.seed}|rho|{kind.value}").gauss(0.0, 1.0)
        return base * math.exp(self.spread * z)

    def true_alpha(self, op) -> float:
        if self.matched_mode:
            return self.params.alpha[op.kind]
        s = self.seed
        if isinstance(op, Select):
            out = 1.0
            for p in op.predicates:
                out *= 0.1 + 0.85 * _unit(s, "pred", p.target.key, p.comparator, p.value)
            return out
        if isinstance(op, ObjectDetection):
            out = 1.0
            for obj in op.objects:
                out *= 0.2 + 0.7 * _unit(s, "obj", op.target.key, obj)
            return out
        if isinstance(op, ObjectCounting):
            base = 0.2 + 0.7 * _unit(s, "obj", op.target.key, op.object)
            return base * 0.75 ** max(op.threshold, 0)
        keys = sorted([op.left_key.key, op.right_key.key])
        return 0.3 + 0.7 * _unit(s, "join", keys)

    def to_json(self) -> dict:
        return {"matched_mode": self.matched_mode, "seed": self.seed, "spread": self.spread}


def _sim(node: PlanNode, catalog: Catalog, profile: SimProfile) -> tuple[float, float]:
    # mirrors the estimator's arithmetic order so matched mode agrees bit for bit
    if isinstance(node.op, TableScan):
        return float(catalog.stats(node.op.table).row_count), 0.0
    rows_in = 0.0
    below = 0.0
    for child in node.children():
        rows, t = _sim(child, catalog, profile)
        rows_in += rows
        below += t
    return profile.true_alpha(node.op) * rows_in, profile.true_rho(node.kind) * rows_in + below


def simulate_time(plan: PlanNode, catalog: Catalog, profile: Optional[SimProfile] = None) -> float:
    return _sim(plan, catalog, profile or SimProfile.matched())[1]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class QueryRecord:
    query_id: int
    initial_plan: str
    optimized_plan: str
    valid: bool
    est_cost_init: float
    est_cost_opt: float
    t_init: float
    t_opt: float
    errors: list[str] = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return self.t_init - self.t_opt

    @property
    def relative_improvement(self) -> float:
        return self.improvement / self.t_init if self.t_init > 0 else 0.0


@dataclass
class MethodSummary:
    method: str
    queries: int
    avg_time_init: float
    avg_time_opt: float
    poi: float
    toi: float
    vr: float

    @classmethod
    def of(cls, method: str, records: Sequence[QueryRecord]) -> "MethodSummary":
        n = len(records)
        return cls(
            method, n,
            sum(r.t_init for r in records) / n,
            sum(r.t_opt for r in records) / n,
            sum(r.relative_improvement for r in records) / n,
            sum(r.improvement for r in records) / n,
            sum(r.valid for r in records) / n,
        )


@dataclass
class OptimizationReport:
    method: str
    records: list[QueryRecord]
    summary: MethodSummary
    config: dict = field(default_factory=dict)

    SCHEMA = 1

    def to_json(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "method": self.method,
            "config": self.config,
            "summary": asdict(self.summary),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "OptimizationReport":
        if doc.get("schema") != cls.SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        records = [QueryRecord(**r) for r in doc["records"]]
        return cls(doc["method"], records, MethodSummary(**doc["summary"]), doc.get("config", {}))

    def records_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["query_id", "valid", "est_cost_init", "est_cost_opt", "t_init", "t_opt", "poi"])
        for r in self.records:
            writer.writerow([r.query_id, int(r.valid), r.est_cost_init, r.est_cost_opt,
                             r.t_init, r.t_opt, r.relative_improvement])
        return buf.getvalue()


OptimizeFn = Callable[[PlanNode], Union[PlanNode, str]]


def evaluate_method(queries: Sequence[PlanNode], optimize_fn: OptimizeFn, catalog: Catalog,
                    params: Optional[CostParams] = None, profile: Optional[SimProfile] = None,
                    backend=None, method: str = "method", jobs: int = 1) -> OptimizationReport:
    """Optimize every query and score the results.

    An optimized plan that fails validation is charged the initial plan's
    time, because the initial plan is what would actually run.
    """
    if not queries:
        raise ValueError("evaluate_method needs at least one query")
    params = params or CostParams()
    profile = profile or SimProfile.matched(params)
    matcher = as_matcher(backend)

    def one(item):
        qid, plan = item
        t_init = simulate_time(plan, catalog, profile)
        c_init = plan_cost(plan, catalog, params)
        try:
            result = optimize_fn(plan)
            text = result if isinstance(result, str) else serialize_plan(result)
            errors = [str(e) for e in check_error(text, plan, catalog, matcher)]
        except Exception as exc:  # noqa: BLE001 - any failure is an invalid plan
            text, errors = "", [f"{type(exc).__name__}: {exc}"]
        if errors:
            return QueryRecord(qid, serialize_plan(plan), text, False, c_init, c_init, t_init, t_init, errors)
        optimized = parse_plan(text)
        return QueryRecord(qid, serialize_plan(plan), text, True, c_init,
                           plan_cost(optimized, catalog, params), t_init,
                           simulate_time(optimized, catalog, profile))

    items = list(enumerate(queries))
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, items))
    else:
        records = [one(item) for item in items]
    return OptimizationReport(method, records, MethodSummary.of(method, records))


def load_corpus(text: str) -> list[PlanNode]:
    from .plan import plan_from_obj
    return [plan_from_obj(doc, text) for doc in json.loads(text)]


def dump_corpus(plans: Sequence[PlanNode]) -> str:
    return json.dumps([json.loads(serialize_plan(p)) for p in plans], indent=1)


__all__ = [
    "COST_ORDER",
    "GenerationExhausted",
    "GeneratorLimits",
    "MethodSummary",
    "OptimizationReport",
    "QueryRecord",
    "SimProfile",
    "demo_catalog",
    "dump_corpus",
    "evaluate_method",
    "generate_corpus",
    "generate_query",
    "load_corpus",
    "simulate_time",
]
