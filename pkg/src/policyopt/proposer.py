"""Plan proposers: the GetPlan step of guided cost descent.

All proposers take a :class:`ProposalContext` and return a :class:`Proposal`
whose ``plan_text`` may or may not be a valid plan; judging it is the
monitor's job. Three implementations ship:

* :class:`GreedyProposer` applies the single cheapest policy rewrite.
* :class:`ExhaustiveProposer` searches the whole rewrite closure (oracle).
* :class:`LLMProposer` asks a chat model, using the two-call prompt flow.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional, Protocol

from .cost import EQUALITY_TOLERANCE, Catalog, CostParams, plan_cost
from .llm import ChatClient, ClientConfig, HttpChatClient, MalformedReply, extract_json_object
from .plan import PlanNode, canonical_key, operator_count, plan_from_obj, serialize_plan
from .rewrite import all_rewrites, keyed_rewrites
from .similarity import as_matcher

HISTORY_LIMIT = 8
IMPROVED = "Improved"
NO_IMPROVEMENT = "No improvement"
NO_VALID = "No valid optimization generated"


def format_cost(cost: float) -> str:
    return f"{cost:.2f}"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return resources.files("policyopt.prompts").joinpath(name).read_text().strip()


def default_policies() -> list[str]:
    return template("policies.txt").splitlines()


def default_examples() -> list[tuple[PlanNode, PlanNode]]:
    pairs = json.loads(template("examples.json"))
    return [(plan_from_obj(p["initial"]), plan_from_obj(p["optimized"])) for p in pairs]


@dataclass
class ProposalContext:
    latest_plan: PlanNode
    latest_cost: float
    policies: list[str] = field(default_factory=default_policies)
    examples: list[tuple[PlanNode, PlanNode]] = field(default_factory=default_examples)
    history_plans: list[PlanNode] = field(default_factory=list)
    history_costs: list[float] = field(default_factory=list)
    feedback: str = ""
    include_cost_feedback: bool = True

    def __post_init__(self):
        if len(self.history_plans) != len(self.history_costs):
            raise ValueError("history plans and costs must align")


@dataclass(frozen=True)
class Proposal:
    plan_text: str
    rationale: str
    proposer_id: str

    def __post_init__(self):
        if not self.plan_text:
            raise ValueError("empty proposal")


class Proposer(Protocol):
    proposer_id: str

    def propose(self, ctx: ProposalContext) -> Proposal: ...

    def fork(self, seed: int) -> "Proposer": ...


class BudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# rule-based proposers


class GreedyProposer:
    """Pick the cheapest single rewrite; stay put when none strictly helps.

    Without a seed, cost ties break by policy order then site path. A seed
    shuffles the choice among tied rewrites only.
    """

    proposer_id = "greedy"

    def __init__(self, catalog: Catalog, params: Optional[CostParams] = None, backend=None,
                 seed: Optional[int] = None):
        self.catalog = catalog
        self.params = params or CostParams()
        self.matcher = as_matcher(backend)
        self.seed = seed
        self._rng = random.Random(seed) if seed is not None else None

    def fork(self, seed: int) -> "GreedyProposer":
        return GreedyProposer(self.catalog, self.params, self.matcher, seed)

    def best_step(self, plan: PlanNode):
        """Cheapest rewrite of ``plan`` and its cost, or ``None``."""
        options = [(plan_cost(rw.result, self.catalog, self.params), rw)
                   for rw in all_rewrites(plan, self.catalog, self.params, self.matcher)]
        if not options:
            return None
        low = min(cost for cost, _ in options)
        tied = [(c, rw) for c, rw in options if c - low <= EQUALITY_TOLERANCE]
        return self._rng.choice(tied) if self._rng is not None else tied[0]

    def propose(self, ctx: ProposalContext) -> Proposal:
        step = self.best_step(ctx.latest_plan)
        current = plan_cost(ctx.latest_plan, self.catalog, self.params)
        if step is None or step[0] >= current - EQUALITY_TOLERANCE:
            return Proposal(serialize_plan(ctx.latest_plan), "no improving rewrite", self.proposer_id)
        cost, rw = step
        return Proposal(serialize_plan(rw.result),
                        f"{rw.policy.label}: {rw.description} (cost {format_cost(cost)})",
                        self.proposer_id)


def rewrite_closure(plan: PlanNode, catalog: Catalog, params: CostParams, backend=None,
                    max_states: int = 200_000) -> dict[str, PlanNode]:
    """Breadth-first closure of ``plan`` under all policy rewrites, keyed canonically."""
    matcher = as_matcher(backend)
    seen = {canonical_key(plan): plan}
    queue = deque([plan])
    while queue:
        current = queue.popleft()
        for key, rw in keyed_rewrites(current, catalog, params, matcher):
            if key in seen:
                continue
            if len(seen) >= max_states:
                raise BudgetExceeded(f"rewrite closure exceeds {max_states} plans")
            seen[key] = rw.result
            queue.append(rw.result)
    return seen


class ExhaustiveProposer:
    """Global minimum over the rewrite closure; ties go to the smaller canonical form."""

    proposer_id = "exhaustive"

    def __init__(self, catalog: Catalog, params: Optional[CostParams] = None, backend=None,
                 node_budget: int = 12, max_states: int = 200_000):
        self.catalog = catalog
        self.params = params or CostParams()
        self.matcher = as_matcher(backend)
        self.node_budget = node_budget
        self.max_states = max_states

    def fork(self, seed: int) -> "ExhaustiveProposer":
        return self

    def minimum(self, plan: PlanNode) -> tuple[PlanNode, float, int]:
        if operator_count(plan) > self.node_budget:
            raise BudgetExceeded(f"plan has {operator_count(plan)} operators; budget is {self.node_budget}")
        closure = rewrite_closure(plan, self.catalog, self.params, self.matcher, self.max_states)
        costs = {key: plan_cost(p, self.catalog, self.params) for key, p in closure.items()}
        low = min(costs.values())
        key = min(k for k, c in costs.items() if c - low <= EQUALITY_TOLERANCE)
        return closure[key], costs[key], len(closure)

    def propose(self, ctx: ProposalContext) -> Proposal:
        best, cost, size = self.minimum(ctx.latest_plan)
        return Proposal(serialize_plan(best), f"closure of {size} plans, minimum cost {format_cost(cost)}",
                        self.proposer_id)


def propose_greedy(ctx: ProposalContext, catalog: Catalog, params: Optional[CostParams] = None,
                   backend=None) -> Proposal:
    return GreedyProposer(catalog, params, backend).propose(ctx)


def propose_exhaustive(ctx: ProposalContext, catalog: Catalog, params: Optional[CostParams] = None,
                       backend=None, node_budget: int = 12) -> Proposal:
    return ExhaustiveProposer(catalog, params, backend, node_budget).propose(ctx)


# ---------------------------------------------------------------------------
# prompts


def _plan_block(plan: PlanNode) -> str:
    return serialize_plan(plan, indent=2)


def _is_cost_feedback(feedback: str) -> bool:
    return feedback.startswith(IMPROVED) or feedback.startswith(NO_IMPROVEMENT)


def _shared_sections(ctx: ProposalContext) -> list[str]:
    policies = "\n".join(f"{i}. {text}" for i, text in enumerate(ctx.policies, 1))
    return [template("role.txt"), "## Policies\n" + policies, "## Plan format\n" + template("grammar.txt")]


def _feedback_section(ctx: ProposalContext) -> list[str]:
    feedback = ctx.feedback
    if not ctx.include_cost_feedback and _is_cost_feedback(feedback):
        feedback = ""
    return ["## Feedback on your previous attempt\n" + feedback] if feedback else []


def _latest_section(ctx: ProposalContext) -> str:
    head = "## Plan to optimize"
    if ctx.include_cost_feedback:
        head += f" (estimated cost {format_cost(ctx.latest_cost)})"
    return head + "\n" + _plan_block(ctx.latest_plan)


def compose_prompts(ctx: ProposalContext, self_instruction: str = "") -> tuple[str, str]:
    """Build the instruction request and the optimization request.

    With ``include_cost_feedback`` off no cost figure and no cost feedback
    reaches either prompt.
    """
    instruction = "\n\n".join(
        _shared_sections(ctx) + _feedback_section(ctx) + [_latest_section(ctx), template("instruction.txt")])

    sections = _shared_sections(ctx)
    if ctx.examples:
        lines = []
        for i, (before, after) in enumerate(ctx.examples, 1):
            lines.append(f"Example {i}, initial plan:\n{_plan_block(before)}")
            lines.append(f"Example {i}, optimized plan:\n{_plan_block(after)}")
        sections.append("## Examples\n" + "\n\n".join(lines))
    if ctx.history_plans:
        recent = list(zip(ctx.history_plans, ctx.history_costs))[-HISTORY_LIMIT:]
        lines = []
        for i, (plan, cost) in enumerate(recent, 1):
            label = f"Valid plan {i}"
            if ctx.include_cost_feedback:
                label += f" (estimated cost {format_cost(cost)})"
            lines.append(f"{label}:\n{_plan_block(plan)}")
        sections.append("## Valid plans so far, oldest first\n" + "\n\n".join(lines))
    sections += _feedback_section(ctx)
    sections.append(_latest_section(ctx))
    if self_instruction:
        sections.append("## Your optimization instruction\n" + self_instruction.strip())
    sections.append("## Output\n" + template("output.txt"))
    return instruction, "\n\n".join(sections)


# ---------------------------------------------------------------------------
# LLM-backed proposer


class LLMProposer:
    """Two chat calls per proposal: a self-instruction, then the plan."""

    proposer_id = "llm"

    def __init__(self, client: ChatClient):
        self.client = client

    def fork(self, seed: int) -> "LLMProposer":
        return self

    def propose(self, ctx: ProposalContext) -> Proposal:
        instruction_request, _ = compose_prompts(ctx)
        instruction = self.client.complete([{"role": "user", "content": instruction_request}])
        _, optimization_request = compose_prompts(ctx, instruction)
        reply = self.client.complete([{"role": "user", "content": optimization_request}])
        rationale = json.dumps({"instruction": instruction, "reply": reply})
        try:
            plan_text = extract_json_object(reply)
        except MalformedReply as exc:
            exc.raw = rationale
            raise
        return Proposal(plan_text, rationale, self.proposer_id)


def propose_llm(ctx: ProposalContext, client) -> Proposal:
    """``client`` is a chat client or a :class:`~policyopt.llm.ClientConfig`."""
    if isinstance(client, ClientConfig):
        client = HttpChatClient(client)
    return LLMProposer(client).propose(ctx)
