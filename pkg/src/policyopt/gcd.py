"""Guided cost descent and cost-based aggregation over sampled runs."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .cost import Catalog, CostParams, plan_cost
from .llm import MalformedReply, TransportError
from .monitor import check_error, check_structure
from .plan import PlanNode, canonical_key, parse_plan, serialize_plan
from .proposer import (
    IMPROVED,
    NO_IMPROVEMENT,
    NO_VALID,
    Proposal,
    ProposalContext,
    Proposer,
    default_examples,
    default_policies,
    format_cost,
)
from .similarity import as_matcher

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 3
DEFAULT_ITERATION_CAP = 25


class InvalidInitialPlan(ValueError):
    pass


def improved_feedback(cost: float) -> str:
    return f"{IMPROVED} {format_cost(cost)}"


def no_improvement_feedback(cost: float) -> str:
    return f"{NO_IMPROVEMENT} {format_cost(cost)}"


@dataclass
class GcdState:
    p0: PlanNode
    c0: float
    p: PlanNode
    c: float
    p_star: PlanNode
    c_star: float
    tolerance: int
    history_plans: list[PlanNode] = field(default_factory=list)
    history_costs: list[float] = field(default_factory=list)
    feedback: str = ""
    n_w: int = 0
    iterations: int = 0

    @classmethod
    def start(cls, p0: PlanNode, c0: float, tolerance: int) -> "GcdState":
        return cls(p0, c0, p0, c0, p0, c0, tolerance)


@dataclass
class IterationRecord:
    iteration: int
    proposal: str
    proposer_id: str
    errors: list[str]
    cost: Optional[float]
    feedback: str
    delivered_feedback: str
    accepted: bool
    n_w: int


@dataclass
class GcdTrace:
    records: list[IterationRecord] = field(default_factory=list)
    initial_cost: float = 0.0
    best_plan: Optional[PlanNode] = None
    best_cost: float = 0.0
    stopped_by: str = ""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def summary(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "best_cost": self.best_cost,
            "best_plan": json.loads(serialize_plan(self.best_plan)) if self.best_plan else None,
            "iterations": len(self.records),
            "stopped_by": self.stopped_by,
        }


def run_gcd(p0: PlanNode, proposer: Proposer, catalog: Catalog, params: Optional[CostParams] = None,
            backend=None, tolerance: int = DEFAULT_TOLERANCE, iteration_cap: int = DEFAULT_ITERATION_CAP,
            lite: bool = False, policies: Optional[list[str]] = None,
            examples: Optional[list] = None) -> tuple[PlanNode, GcdTrace]:
    """Optimize ``p0`` until ``tolerance`` consecutive wrong optimizations.

    A wrong optimization is an invalid proposal or a valid one that does not
    lower the cost of the latest valid plan. The best plan seen is returned,
    so the result never costs more than ``p0``. In lite mode the proposer
    only ever hears error feedback; cost comparisons still run.
    """
    if tolerance < 1:
        raise ValueError("tolerance must be at least 1")
    params = params or CostParams()
    matcher = as_matcher(backend)
    structural = check_structure(p0, catalog)
    if structural:
        raise InvalidInitialPlan("; ".join(str(e) for e in structural))
    policies = default_policies() if policies is None else policies
    examples = default_examples() if examples is None else examples

    c0 = plan_cost(p0, catalog, params)
    st = GcdState.start(p0, c0, tolerance)
    trace = GcdTrace(initial_cost=c0)

    while st.n_w < st.tolerance:
        if st.iterations >= iteration_cap:
            trace.stopped_by = "iteration_cap"
            break
        delivered = st.feedback
        if lite and delivered != NO_VALID:
            delivered = ""
        ctx = ProposalContext(
            latest_plan=st.p, latest_cost=st.c, policies=policies, examples=examples,
            history_plans=list(st.history_plans), history_costs=list(st.history_costs),
            feedback=delivered, include_cost_feedback=not lite)
        st.iterations += 1

        text, proposer_id, errors = "", getattr(proposer, "proposer_id", "?"), []
        try:
            proposal: Proposal = proposer.propose(ctx)
            text, proposer_id = proposal.plan_text, proposal.proposer_id
            errors = [str(e) for e in check_error(text, p0, catalog, matcher)]
        except (TransportError, MalformedReply) as exc:
            errors = [f"{type(exc).__name__}: {exc}"]

        cost = None
        if not errors:
            candidate = parse_plan(text)
            cost = plan_cost(candidate, catalog, params)
            if cost >= st.c:
                st.n_w += 1
                st.feedback = no_improvement_feedback(cost)
            else:
                if cost < st.c_star:
                    st.p_star, st.c_star = candidate, cost
                st.n_w = 0
                st.feedback = improved_feedback(cost)
            st.c, st.p = cost, candidate
            st.history_plans.append(candidate)
            st.history_costs.append(cost)
        else:
            st.n_w += 1
            st.feedback = NO_VALID

        trace.records.append(IterationRecord(
            st.iterations, text, proposer_id, errors, cost, st.feedback, delivered,
            not errors, st.n_w))
        log.debug("gcd iteration %d: %s", st.iterations, st.feedback)
    else:
        trace.stopped_by = "tolerance"

    trace.best_plan, trace.best_cost = st.p_star, st.c_star
    return st.p_star, trace


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Candidate:
    plan_text: str
    valid: bool
    cost: float

    @property
    def effective_cost(self) -> float:
        return self.cost if self.valid else math.inf


def _vote_key(text: str) -> str:
    try:
        return canonical_key(parse_plan(text))
    except ValueError:
        return text


def aggregate(candidates: Sequence[Candidate]) -> Candidate:
    """Frequency vote over canonical forms; cost breaks ties.

    Invalid candidates carry infinite cost, and when any candidate is valid
    only valid ones enter the vote. Remaining ties go to the smaller
    canonical serialization.
    """
    if not candidates:
        raise ValueError("aggregate needs at least one candidate")
    pool = [c for c in candidates if c.valid] or list(candidates)
    keys = [_vote_key(c.plan_text) for c in pool]
    freq = Counter(keys)
    best_cost: dict[str, float] = {}
    first: dict[str, Candidate] = {}
    for key, cand in zip(keys, pool):
        best_cost[key] = min(best_cost.get(key, math.inf), cand.effective_cost)
        first.setdefault(key, cand)
    winner = min(freq, key=lambda k: (-freq[k], best_cost[k], k))
    return first[winner]


def run_aggregated(p0: PlanNode, proposer: Proposer, k: int, catalog: Catalog,
                   params: Optional[CostParams] = None, backend=None, seed: int = 0,
                   jobs: int = 1, **gcd_kwargs) -> tuple[PlanNode, list[Optional[GcdTrace]]]:
    """Run guided cost descent ``k`` times and aggregate the best plans.

    Run ``i`` uses ``proposer.fork(seed + i)``. A run that raises contributes
    ``p0`` as an invalid candidate.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    params = params or CostParams()
    matcher = as_matcher(backend)

    def one(i: int):
        runner = proposer.fork(seed + i) if hasattr(proposer, "fork") else proposer
        try:
            best, trace = run_gcd(p0, runner, catalog, params, matcher, **gcd_kwargs)
        except Exception as exc:  # noqa: BLE001 - a failed sample is just an invalid vote
            log.warning("aggregated run %d failed: %s", i, exc)
            return Candidate(serialize_plan(p0), False, math.inf), None
        valid = not check_error(best, p0, catalog, matcher)
        return Candidate(serialize_plan(best), valid, trace.best_cost), trace

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(k)))
    else:
        results = [one(i) for i in range(k)]
    chosen = aggregate([c for c, _ in results])
    return parse_plan(chosen.plan_text), [t for _, t in results]

