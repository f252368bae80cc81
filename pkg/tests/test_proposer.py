import json
import re

import httpx
import pytest

from conftest import COUNT_ONLY, assert_golden
from policyopt.cost import plan_cost
from policyopt.llm import ClientConfig, HttpChatClient, MalformedReply, ScriptedClient, TransportError, extract_json_object
from policyopt.plan import (
    ColumnRef,
    ObjectDetection,
    Select,
    SimplePredicate,
    canonical_key,
    operator_count,
    parse_plan,
    scan,
    unary,
)
from policyopt.proposer import (
    HISTORY_LIMIT,
    NO_VALID,
    BudgetExceeded,
    ExhaustiveProposer,
    GreedyProposer,
    LLMProposer,
    ProposalContext,
    compose_prompts,
    format_cost,
    propose_exhaustive,
    propose_greedy,
    propose_llm,
)
from policyopt.workload import GeneratorLimits, generate_corpus, generate_query

COST_NUMERAL = re.compile(r"\d+\.\d\d\b")


def ctx_for(plan, catalog, params, lite=False, feedback="", history=()):
    return ProposalContext(
        latest_plan=plan, latest_cost=plan_cost(plan, catalog, params),
        history_plans=[p for p in history], history_costs=[plan_cost(p, catalog, params) for p in history],
        feedback=feedback, include_cost_feedback=not lite)


# -- rule-based proposers -------------------------------------------------


def test_greedy_takes_the_removal(initial3, optimized3, catalog3, params):
    proposal = propose_greedy(ctx_for(initial3, catalog3, params), catalog3, params)
    assert canonical_key(parse_plan(proposal.plan_text)) == canonical_key(optimized3)
    assert proposal.proposer_id == "greedy"


def test_greedy_leaves_a_scan_alone(ab_catalog, params):
    proposal = propose_greedy(ctx_for(scan("A"), ab_catalog, params), ab_catalog, params)
    assert parse_plan(proposal.plan_text) == scan("A")


def test_greedy_swaps_select_below_detection(ab_catalog, params):
    det = ObjectDetection(ColumnRef("A", "img"), ("dog",))
    sel = Select((SimplePredicate(ColumnRef("A", "x"), ">", 1),))
    plan = unary(sel, unary(det, scan("A")))
    proposal = propose_greedy(ctx_for(plan, ab_catalog, params), ab_catalog, params)
    assert parse_plan(proposal.plan_text) == unary(det, unary(sel, scan("A")))


@pytest.fixture(scope="module")
def small_plans(demo):
    return generate_corpus(10, 41, demo)


def test_greedy_never_raises_cost_and_exhaustive_is_no_worse(small_plans, demo, params):
    oracle = ExhaustiveProposer(demo, params)
    for plan in sorted(small_plans, key=operator_count)[:6]:
        c0 = plan_cost(plan, demo, params)
        greedy = parse_plan(propose_greedy(ctx_for(plan, demo, params), demo, params).plan_text)
        g = plan_cost(greedy, demo, params)
        _, best, _ = oracle.minimum(plan)
        assert g <= c0 + 1e-9
        assert best <= g + 1e-9


def test_exhaustive_on_scan_and_fixture(initial3, catalog3, params, ab_catalog):
    assert parse_plan(propose_exhaustive(ctx_for(scan("A"), ab_catalog, params), ab_catalog, params).plan_text) \
        == scan("A")
    best = parse_plan(propose_exhaustive(ctx_for(initial3, catalog3, params), catalog3, params).plan_text)
    greedy = parse_plan(propose_greedy(ctx_for(initial3, catalog3, params), catalog3, params).plan_text)
    assert plan_cost(best, catalog3, params) <= plan_cost(greedy, catalog3, params)


def test_exhaustive_budget(small_plans, demo, params):
    with pytest.raises(BudgetExceeded):
        ExhaustiveProposer(demo, params, node_budget=2).minimum(small_plans[0])


def test_closure_size_is_bounded_by_the_state_cap(demo, params):
    # Twelve stacked operators reach far more than a few thousand plans; the
    # search must stop with BudgetExceeded instead of running away.
    limits = GeneratorLimits(max_selects=4, max_detections=3, max_countings=2, min_operators=12, max_attempts=5000)
    plan = generate_query(0, demo, limits)
    assert operator_count(plan) == 12
    with pytest.raises(BudgetExceeded, match="exceeds 3000 plans"):
        ExhaustiveProposer(demo, params, max_states=3000).minimum(plan)
    bigger = unary(Select((SimplePredicate(ColumnRef("artworks", "year"), ">", 1),)), plan)
    with pytest.raises(BudgetExceeded, match="budget is 12"):
        ExhaustiveProposer(demo, params).minimum(bigger)


def test_seeded_greedy_only_reorders_ties(small_plans, demo, params):
    base = GreedyProposer(demo, params)
    for plan in small_plans[:4]:
        ref = base.best_step(plan)
        for seed in range(3):
            step = base.fork(seed).best_step(plan)
            assert step[0] == pytest.approx(ref[0])


# -- prompts --------------------------------------------------------------


@pytest.fixture
def gcd_like_ctx(initial3, optimized3, catalog3, params):
    def make(lite, feedback):
        return ctx_for(optimized3, catalog3, params, lite=lite, feedback=feedback, history=[optimized3])
    return make


def test_full_prompts_are_pinned(gcd_like_ctx):
    instruction, optimization = compose_prompts(gcd_like_ctx(False, "Improved 200000.00"), "Remove the detection.")
    assert_golden("full_instruction.txt", instruction)
    assert_golden("full_optimization.txt", optimization)


def test_lite_prompts_are_pinned(gcd_like_ctx):
    instruction, optimization = compose_prompts(gcd_like_ctx(True, NO_VALID), "Remove the detection.")
    assert_golden("lite_instruction.txt", instruction)
    assert_golden("lite_optimization.txt", optimization)


def test_lite_prompts_carry_no_costs(gcd_like_ctx):
    for feedback in ("Improved 200000.00", "No improvement 200000.00", NO_VALID, ""):
        for prompt in compose_prompts(gcd_like_ctx(True, feedback), "step"):
            assert not COST_NUMERAL.search(prompt)
            assert "Improved" not in prompt and "No improvement" not in prompt
            assert format_cost(200000) not in prompt


def test_full_prompts_carry_costs(gcd_like_ctx):
    _, optimization = compose_prompts(gcd_like_ctx(False, "Improved 200000.00"))
    assert "Improved 200000.00" in optimization
    assert "(estimated cost 200000.00)" in optimization


def test_no_valid_feedback_appears_verbatim(gcd_like_ctx):
    for lite in (False, True):
        for prompt in compose_prompts(gcd_like_ctx(lite, NO_VALID)):
            assert NO_VALID in prompt


def test_empty_history_is_omitted(initial3, catalog3, params):
    _, optimization = compose_prompts(ctx_for(initial3, catalog3, params))
    assert "Valid plans so far" not in optimization
    assert "Feedback" not in optimization


def test_section_order(gcd_like_ctx):
    _, optimization = compose_prompts(gcd_like_ctx(False, "Improved 200000.00"), "Remove the detection.")
    heads = ["## Policies", "## Plan format", "## Examples", "## Valid plans so far", "## Feedback",
             "## Plan to optimize", "## Your optimization instruction", "## Output"]
    positions = [optimization.index(h) for h in heads]
    assert positions == sorted(positions)


def test_prompts_are_deterministic_and_injective_in_feedback(gcd_like_ctx):
    a = compose_prompts(gcd_like_ctx(False, "Improved 1.00"))
    assert a == compose_prompts(gcd_like_ctx(False, "Improved 1.00"))
    assert a != compose_prompts(gcd_like_ctx(False, "Improved 2.00"))


def test_history_is_capped(optimized3, catalog3, params):
    history = [optimized3] * (HISTORY_LIMIT + 4)
    _, optimization = compose_prompts(ctx_for(optimized3, catalog3, params, history=history))
    assert optimization.count("Valid plan ") == HISTORY_LIMIT


# -- chat-backed proposer -------------------------------------------------


def _mock_endpoint(replies, seen):
    it = iter(replies)

    def handler(request):
        seen.append(json.loads(request.content))
        status, content = next(it)
        if status != 200:
            return httpx.Response(status, text="boom")
        return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})
    return httpx.MockTransport(handler)


def test_llm_proposal_passes_the_plan_through(initial3, catalog3, params):
    seen = []
    transport = _mock_endpoint([(200, "I will drop the detection."), (200, COUNT_ONLY)], seen)
    client = HttpChatClient(ClientConfig("http://llm.test/v1", "m"), transport)
    proposal = propose_llm(ctx_for(initial3, catalog3, params), client)
    assert json.loads(proposal.plan_text) == json.loads(COUNT_ONLY)
    assert len(seen) == 2 and all(body["temperature"] == 0.7 for body in seen)
    assert "I will drop the detection." in seen[1]["messages"][0]["content"]
    assert "I will drop the detection." in json.loads(proposal.rationale)["instruction"]


def test_llm_endpoint_error_is_transport_error(initial3, catalog3, params):
    client = HttpChatClient(ClientConfig("http://llm.test/v1", "m"), _mock_endpoint([(500, "")], []))
    with pytest.raises(TransportError):
        propose_llm(ctx_for(initial3, catalog3, params), client)


def test_llm_reply_without_json_is_malformed(initial3, catalog3, params):
    proposer = LLMProposer(ScriptedClient(["thinking", "I cannot help with that."]))
    with pytest.raises(MalformedReply):
        proposer.propose(ctx_for(initial3, catalog3, params))


def wrapped_replies(plan_text):
    """Twenty ways a chatty model might wrap one plan document."""
    compact = json.dumps(json.loads(plan_text))
    pretty = json.dumps(json.loads(plan_text), indent=2)
    return [
        compact,
        pretty,
        f"Here is the plan:\n{compact}",
        f"```json\n{pretty}\n```",
        f"```\n{compact}\n```\nLet me know if you need more.",
        f"Sure! {compact} That should be faster.",
        f"The optimized plan is below.\n\n{pretty}\n\nI removed the redundant detection.",
        f"Reasoning: counting subsumes detection {{as usual}}.\n{compact}",
        f"Step 1: drop {{detection}}. Step 2: done.\n```json\n{pretty}\n```",
        f"{compact}\n\nNote: braces in text {{like this}} are ignored.",
        f"Plan:\r\n{pretty}\r\n",
        f"<answer>{compact}</answer>",
        f"> {compact}",
        f"Final answer -> {compact} <- end",
        f"The key \"Operator\" matters.\n{compact}",
        f"{{not json}} then the plan {compact}",
        f"Output:\n\t{pretty}",
        f"Plan A was worse. Plan B: {compact}",
        f"JSON:{compact}{{}}",
        f"Thinking... done.\n\n\n{compact}\n\n\n",
    ]


def test_json_extraction_over_wrapped_replies():
    replies = wrapped_replies(COUNT_ONLY)
    assert len(replies) == 20
    for reply in replies:
        assert json.loads(extract_json_object(reply)) == json.loads(COUNT_ONLY), reply
