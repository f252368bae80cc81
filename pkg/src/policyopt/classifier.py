"""Pairwise "which plan runs faster" classification with a chat model.

Training shows the model labelled pairs one at a time and appends each of
its answers, the judgment and the true times to the prompt. Once frozen,
the accumulated prompt is used read-only to classify unseen pairs.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .cost import Catalog, CostParams, plan_cost
from .llm import ChatClient, MalformedReply, TransportError, extract_json_object
from .plan import PlanNode, parse_plan, serialize_plan
from .proposer import template
from .rewrite import all_rewrites
from .workload import SimProfile, simulate_time

FIRST, SECOND = "first", "second"

_FASTER = re.compile(r"^\s*FASTER:\s*(first|second)\s*$", re.IGNORECASE | re.MULTILINE)
_ESTIMATES = re.compile(
    r"^\s*ESTIMATES:\s*([-+0-9.eE]+)\s*[;,]\s*([-+0-9.eE]+)\s*$", re.IGNORECASE | re.MULTILINE)

FIRST_MARK = "First plan:"
SECOND_MARK = "Second plan:"


class SessionFrozen(RuntimeError):
    """Training was attempted on a frozen session."""


class SessionNotFrozen(RuntimeError):
    """Classification was attempted before training finished."""


@dataclass(frozen=True)
class PairVerdict:
    faster: str
    estimated_times: tuple[float, float]
    explanation: str = ""

    def __post_init__(self):
        if self.faster not in (FIRST, SECOND):
            raise ValueError(f"faster must be 'first' or 'second', got {self.faster!r}")
        a, b = self.estimated_times
        if a != b and (a < b) != (self.faster == FIRST):
            raise ValueError("verdict contradicts the estimated times")


def parse_verdict(text: str) -> PairVerdict:
    """Read the ``ESTIMATES`` and final ``FASTER`` lines of a reply."""
    verdicts = _FASTER.findall(text)
    estimates = _ESTIMATES.findall(text)
    if not verdicts:
        raise MalformedReply("reply has no 'FASTER: first|second' line", text)
    if not estimates:
        raise MalformedReply("reply has no 'ESTIMATES: <first>; <second>' line", text)
    try:
        times = (float(estimates[-1][0]), float(estimates[-1][1]))
    except ValueError:
        raise MalformedReply("estimated times are not numbers", text) from None
    explanation = _ESTIMATES.sub("", _FASTER.sub("", text)).strip()
    try:
        return PairVerdict(verdicts[-1].lower(), times, explanation)
    except ValueError as exc:
        raise MalformedReply(str(exc), text) from None


def true_winner_ok(verdict: Optional[str], time_a: float, time_b: float) -> bool:
    """Whether a verdict agrees with the true times; ties accept either side."""
    if verdict is None:
        return False
    if time_a == time_b:
        return True
    return (verdict == FIRST) == (time_a < time_b)


# ---------------------------------------------------------------------------
# prompts


def build_initial_prompt(catalog: Catalog) -> str:
    lines = []
    images = 0
    for name in sorted(catalog.tables):
        stats = catalog.tables[name]
        cols = []
        for col in stats.columns:
            tags = [t for t, on in (("unique", col in stats.unique_columns),
                                    ("image path", col in stats.image_columns)) if on]
            cols.append(f"{col} ({', '.join(tags)})" if tags else col)
        images += stats.row_count * len(stats.image_columns)
        lines.append(f"- {name}: {stats.row_count} rows; columns: {', '.join(cols)}")
    stats_block = "\n".join(lines) if lines else "(no tables)"
    return "\n\n".join([
        "You compare two query plans over the same database and decide which one executes faster.",
        "## Plan format\n" + template("grammar.txt").strip(),
        f"## Database statistics\nNumber of images: {images}\n{stats_block}",
        "## Answer format\n"
        "Explain your reasoning, then end with exactly these two lines:\n"
        "ESTIMATES: <estimated time of the first plan>; <estimated time of the second plan>\n"
        "FASTER: first|second",
    ])


def pair_request(plan_a: PlanNode, plan_b: PlanNode) -> str:
    return (f"{FIRST_MARK}\n{serialize_plan(plan_a, indent=1)}\n\n"
            f"{SECOND_MARK}\n{serialize_plan(plan_b, indent=1)}\n\n"
            "Which plan executes faster?")


@dataclass
class TrainingRecord:
    plan_a: str
    plan_b: str
    reply: str
    explanation: str
    estimated_times: Optional[tuple[float, float]]
    verdict: Optional[str]
    correct: bool
    true_times: tuple[float, float]

    def render(self, index: int) -> str:
        a, b = self.true_times
        judgment = "correct" if self.correct else "incorrect"
        return (f"### Training pair {index}\n"
                f"{FIRST_MARK}\n{self.plan_a}\n{SECOND_MARK}\n{self.plan_b}\n"
                f"Your answer:\n{self.reply.strip()}\n"
                f"Judgment: {judgment}. True execution times: first {a:.2f}, second {b:.2f}.")


@dataclass
class ClassifierSession:
    initial_prompt: str
    records: list[TrainingRecord] = field(default_factory=list)
    frozen: bool = False

    @classmethod
    def start(cls, catalog: Catalog) -> "ClassifierSession":
        return cls(build_initial_prompt(catalog))

    def freeze(self) -> "ClassifierSession":
        self.frozen = True
        return self

    def prompt(self) -> str:
        if not self.records:
            return self.initial_prompt
        history = "\n\n".join(r.render(i + 1) for i, r in enumerate(self.records))
        return f"{self.initial_prompt}\n\n## Training history\n{history}"

    def to_json(self) -> dict:
        return {"initial_prompt": self.initial_prompt, "frozen": self.frozen,
                "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_json(cls, doc: dict) -> "ClassifierSession":
        records = []
        for r in doc.get("records", []):
            r = dict(r)
            r["true_times"] = tuple(r["true_times"])
            if r.get("estimated_times") is not None:
                r["estimated_times"] = tuple(r["estimated_times"])
            records.append(TrainingRecord(**r))
        return cls(doc["initial_prompt"], records, bool(doc.get("frozen", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ClassifierSession":
        return cls.from_json(json.loads(Path(path).read_text()))


def _ask(session: ClassifierSession, plan_a: PlanNode, plan_b: PlanNode, client: ChatClient) -> str:
    return client.complete([
        {"role": "system", "content": session.prompt()},
        {"role": "user", "content": pair_request(plan_a, plan_b)},
    ])


def train_step(session: ClassifierSession, plan_a: PlanNode, plan_b: PlanNode,
               true_time_a: float, true_time_b: float, client: ChatClient) -> ClassifierSession:
    """Ask about one labelled pair and append the outcome to the session.

    A reply that cannot be parsed is kept verbatim and judged incorrect.
    """
    if session.frozen:
        raise SessionFrozen("the session is frozen; no further history is appended")
    reply = _ask(session, plan_a, plan_b, client)
    try:
        v = parse_verdict(reply)
        verdict, estimates, explanation = v.faster, v.estimated_times, v.explanation
    except MalformedReply:
        verdict, estimates, explanation = None, None, ""
    session.records.append(TrainingRecord(
        serialize_plan(plan_a), serialize_plan(plan_b), reply, explanation, estimates, verdict,
        true_winner_ok(verdict, true_time_a, true_time_b), (true_time_a, true_time_b)))
    return session


def classify(session: ClassifierSession, plan_a: PlanNode, plan_b: PlanNode,
             client: ChatClient) -> PairVerdict:
    if not session.frozen:
        raise SessionNotFrozen("freeze the session before classifying")
    return parse_verdict(_ask(session, plan_a, plan_b, client))


# ---------------------------------------------------------------------------
# harness


@dataclass(frozen=True)
class LabeledPair:
    plan_a: PlanNode
    plan_b: PlanNode
    time_a: float
    time_b: float


@dataclass
class HarnessResult:
    llm_accuracy: float
    cost_model_accuracy: float
    n_train: int
    n_test: int
    verdicts: list[Optional[str]]

    def to_json(self) -> dict:
        return asdict(self)


def sample_pairs(queries: Sequence[PlanNode], catalog: Catalog, params: Optional[CostParams] = None,
                 profile: Optional[SimProfile] = None, seed: int = 0) -> list[LabeledPair]:
    """One pair per query: the query and a random single-step rewrite of it.

    Queries without any rewrite are skipped; pair order is shuffled.
    """
    params = params or CostParams()
    profile = profile or SimProfile.matched(params)
    rng = random.Random(seed)
    pairs = []
    for q in queries:
        options = all_rewrites(q, catalog, params)
        if not options:
            continue
        other = rng.choice(options).result
        a, b = (q, other) if rng.random() < 0.5 else (other, q)
        pairs.append(LabeledPair(a, b, simulate_time(a, catalog, profile), simulate_time(b, catalog, profile)))
    return pairs


def cost_model_verdict(pair: LabeledPair, catalog: Catalog, params: CostParams) -> str:
    return FIRST if plan_cost(pair.plan_a, catalog, params) <= plan_cost(pair.plan_b, catalog, params) else SECOND


def accuracy_harness(pairs: Sequence[LabeledPair], session: ClassifierSession, client: ChatClient,
                     catalog: Catalog, params: Optional[CostParams] = None) -> HarnessResult:
    """Train on the first half of ``pairs``, then score both predictors on the rest."""
    params = params or CostParams()
    n_train = len(pairs) // 2
    train, test = pairs[:n_train], pairs[n_train:]
    for p in train:
        train_step(session, p.plan_a, p.plan_b, p.time_a, p.time_b, client)
    session.freeze()
    verdicts: list[Optional[str]] = []
    for p in test:
        try:
            verdicts.append(classify(session, p.plan_a, p.plan_b, client).faster)
        except (MalformedReply, TransportError):
            verdicts.append(None)
    if not test:
        return HarnessResult(0.0, 0.0, n_train, 0, verdicts)
    llm_ok = sum(true_winner_ok(v, p.time_a, p.time_b) for v, p in zip(verdicts, test))
    cm_ok = sum(true_winner_ok(cost_model_verdict(p, catalog, params), p.time_a, p.time_b) for p in test)
    return HarnessResult(llm_ok / len(test), cm_ok / len(test), n_train, len(test), verdicts)


class CostModelClient:
    """Offline stand-in for a chat model that answers with the cost model."""

    def __init__(self, catalog: Catalog, params: Optional[CostParams] = None):
        self.catalog = catalog
        self.params = params or CostParams()

    def complete(self, messages) -> str:
        text = messages[-1]["content"]
        first = text[text.index(FIRST_MARK) + len(FIRST_MARK):text.index(SECOND_MARK)]
        second = text[text.index(SECOND_MARK) + len(SECOND_MARK):]
        a = plan_cost(parse_plan(extract_json_object(first)), self.catalog, self.params)
        b = plan_cost(parse_plan(extract_json_object(second)), self.catalog, self.params)
        return (f"Estimated from per-row operator costs.\nESTIMATES: {a!r}; {b!r}\n"
                f"FASTER: {FIRST if a <= b else SECOND}")
