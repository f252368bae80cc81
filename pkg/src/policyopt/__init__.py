"""Policy-guided optimization of multi-modal query plans."""

from .cost import Catalog, CostParams, TableStats, output_rows, plan_cost
from .gcd import aggregate, run_aggregated, run_gcd
from .monitor import check_equivalence, check_error, check_structure
from .plan import PlanNode, canonical_key, parse_plan, serialize_plan
from .proposer import ExhaustiveProposer, GreedyProposer, LLMProposer
from .rewrite import all_rewrites
from .workload import SimProfile, demo_catalog, evaluate_method, generate_corpus, generate_query

__all__ = [
    "Catalog",
    "CostParams",
    "ExhaustiveProposer",
    "GreedyProposer",
    "LLMProposer",
    "PlanNode",
    "SimProfile",
    "TableStats",
    "aggregate",
    "all_rewrites",
    "canonical_key",
    "check_equivalence",
    "check_error",
    "check_structure",
    "demo_catalog",
    "evaluate_method",
    "generate_corpus",
    "generate_query",
    "output_rows",
    "parse_plan",
    "plan_cost",
    "run_aggregated",
    "run_gcd",
    "serialize_plan",
]
