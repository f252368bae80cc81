"""Catalog statistics and the per-operator cost model.

Every non-scan operator ``r`` with children ``S`` gets

    rows(r) = alpha[kind(r)] * sum(rows(i) for i in S)
    cost(r) = rho[kind(r)]   * sum(rows(i) for i in S)

and a plan costs the sum of ``cost`` over all of its nodes. Scans cost
nothing and emit the table's row count.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Mapping, Optional

from .plan import OpKind, PlanNode, TableScan

EQUALITY_TOLERANCE = 1e-9

# Cheapest first; a valid parameter set keeps rho strictly increasing along it.
COST_ORDER = (OpKind.SELECT, OpKind.JOIN, OpKind.OBJECT_DETECTION, OpKind.OBJECT_COUNTING)

DEFAULT_RHO = {
    OpKind.SELECT: 1.0,
    OpKind.JOIN: 5.0,
    OpKind.OBJECT_DETECTION: 100.0,
    OpKind.OBJECT_COUNTING: 200.0,
}
DEFAULT_ALPHA = {
    OpKind.SELECT: 0.5,
    OpKind.JOIN: 0.8,
    OpKind.OBJECT_DETECTION: 0.6,
    OpKind.OBJECT_COUNTING: 0.3,
}


class UnknownTableError(LookupError):
    def __init__(self, table: str):
        self.table = table
        super().__init__(f"table {table!r} is not in the catalog")


@dataclass(frozen=True)
class TableStats:
    row_count: int
    columns: tuple[str, ...]
    unique_columns: frozenset[str] = frozenset()
    image_columns: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "unique_columns", frozenset(self.unique_columns))
        object.__setattr__(self, "image_columns", frozenset(self.image_columns))
        if self.row_count < 0:
            raise ValueError("row_count must be non-negative")
        stray = (self.unique_columns | self.image_columns) - set(self.columns)
        if stray:
            raise ValueError(f"columns {sorted(stray)} are not declared")
        object.__setattr__(self, "_folded", {c.casefold(): c for c in self.columns})

    def column(self, name: str) -> Optional[str]:
        """Declared spelling of ``name`` (matched case-insensitively), or ``None``."""
        return self._folded.get(name.casefold())

    def is_image(self, name: str) -> bool:
        return self.column(name) in self.image_columns


@dataclass(frozen=True)
class Catalog:
    """Table statistics; table names match case-insensitively."""

    tables: Mapping[str, TableStats] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_folded", {name.casefold(): t for name, t in self.tables.items()})

    def stats(self, table: str) -> TableStats:
        try:
            return self._folded[table.casefold()]
        except KeyError:
            raise UnknownTableError(table) from None

    def __contains__(self, table: str) -> bool:
        return table.casefold() in self._folded

    def scaled(self, factor: float) -> "Catalog":
        return Catalog({
            name: TableStats(round(t.row_count * factor), t.columns, t.unique_columns, t.image_columns)
            for name, t in self.tables.items()
        })

    def to_json(self) -> dict:
        return {
            name: {
                "row_count": t.row_count,
                "columns": list(t.columns),
                "unique_columns": sorted(t.unique_columns),
                "image_columns": sorted(t.image_columns),
            }
            for name, t in sorted(self.tables.items())
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Catalog":
        return cls({
            name: TableStats(
                int(spec["row_count"]),
                tuple(spec.get("columns", ())),
                frozenset(spec.get("unique_columns", ())),
                frozenset(spec.get("image_columns", ())),
            )
            for name, spec in doc.items()
        })

    @classmethod
    def load(cls, path) -> "Catalog":
        return cls.from_json(json.loads(FsPath(path).read_text()))


def _kind_map(raw: Mapping) -> dict[OpKind, float]:
    return {OpKind(k): float(v) for k, v in raw.items()}


@dataclass(frozen=True)
class CostParams:
    rho: Mapping[OpKind, float] = field(default_factory=lambda: dict(DEFAULT_RHO))
    alpha: Mapping[OpKind, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))

    def __post_init__(self):
        object.__setattr__(self, "rho", _kind_map(self.rho))
        object.__setattr__(self, "alpha", _kind_map(self.alpha))
        for kind in COST_ORDER:
            if kind not in self.rho or kind not in self.alpha:
                raise ValueError(f"missing parameters for {kind}")
            if self.rho[kind] <= 0:
                raise ValueError(f"rho[{kind}] must be positive")
            if not 0 < self.alpha[kind] <= 1:
                raise ValueError(f"alpha[{kind}] must lie in (0, 1]")

    @property
    def respects_cost_order(self) -> bool:
        values = [self.rho[k] for k in COST_ORDER]
        return all(a < b for a, b in zip(values, values[1:]))

    def to_json(self) -> dict:
        return {
            "rho": {k.value: self.rho[k] for k in COST_ORDER},
            "alpha": {k.value: self.alpha[k] for k in COST_ORDER},
        }

    @classmethod
    def from_json(cls, doc: Mapping, strict: bool = True) -> "CostParams":
        params = cls(
            {**DEFAULT_RHO, **_kind_map(doc.get("rho", {}))},
            {**DEFAULT_ALPHA, **_kind_map(doc.get("alpha", {}))},
        )
        if strict and not params.respects_cost_order:
            raise ValueError("rho must increase Select < Join < ObjectDetection < ObjectCounting")
        return params

    @classmethod
    def load(cls, path, strict: bool = True) -> "CostParams":
        return cls.from_json(json.loads(FsPath(path).read_text()), strict=strict)


def _input_rows(node: PlanNode, catalog: Catalog, params: CostParams) -> float:
    return sum(output_rows(child, catalog, params) for child in node.children())


def output_rows(node: PlanNode, catalog: Catalog, params: CostParams) -> float:
    if isinstance(node.op, TableScan):
        return float(catalog.stats(node.op.table).row_count)
    return params.alpha[node.kind] * _input_rows(node, catalog, params)


def node_cost(node: PlanNode, catalog: Catalog, params: CostParams) -> float:
    if isinstance(node.op, TableScan):
        return 0.0
    return params.rho[node.kind] * _input_rows(node, catalog, params)


def _rows_and_cost(node: PlanNode, catalog: Catalog, params: CostParams) -> tuple[float, float]:
    if isinstance(node.op, TableScan):
        return float(catalog.stats(node.op.table).row_count), 0.0
    rows_in = 0.0
    below = 0.0
    for child in node.children():
        rows, cost = _rows_and_cost(child, catalog, params)
        rows_in += rows
        below += cost
    return params.alpha[node.kind] * rows_in, params.rho[node.kind] * rows_in + below


def plan_cost(plan: PlanNode, catalog: Catalog, params: Optional[CostParams] = None) -> float:
    """Total estimated cost: the sum of :func:`node_cost` over every node."""
    return _rows_and_cost(plan, catalog, params or CostParams())[1]


class Ordering(enum.Enum):
    A_CHEAPER = "a_cheaper"
    B_CHEAPER = "b_cheaper"
    EQUAL = "equal"


def compare_costs(a: float, b: float, tol: float = EQUALITY_TOLERANCE) -> Ordering:
    if abs(a - b) <= tol:
        return Ordering.EQUAL
    return Ordering.A_CHEAPER if a < b else Ordering.B_CHEAPER


def compare_plans(a: PlanNode, b: PlanNode, catalog: Catalog, params: CostParams) -> Ordering:
    return compare_costs(plan_cost(a, catalog, params), plan_cost(b, catalog, params))
