import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import MEETING_QUERY, MEETING_RESPONSE, NAV_GOLD
from synthetic import (
    ConstantScorer,
    CooperativeGenerator,
    ScriptedGenerator,
    ToolScorer,
    demo_words,
    synthetic_instances,
)
from toolcurriculum.curriculum import Stage, TokenLogProbs
from toolcurriculum.dataset import Instance
from toolcurriculum.isif import (
    IsifConfig,
    ScoredInstance,
    build_selfinstruct_prompt,
    filter_high_perplexity,
    isif_step,
    parse_generated,
    perplexity,
    selection_size,
    validate_instance,
)
from toolcurriculum.metrics import rouge_l, tokenize
from toolcurriculum.retriever import build_index
from toolcurriculum.transport import EndpointError

CLEAN = (
    "Routes are [PATH(string: Paris, string: Rome) → %s1]. Flights only: [FILTER(list: %s1, string: flight) → %s2]. "
    "Cheapest is [MIN(list: %s2, string: cost) → %s3]. Booked [BOOK(path: %s3) → %s4]. ### Your ticket is %s4."
)
THREE_TOOLS = (
    "Options [PATH(string: Oslo, string: Bergen) → %s1], by bus [FILTER(list: %s1, string: bus) → %s2], "
    "quickest [MIN(list: %s2, string: time) → %s3] and slowest [MIN(list: %s2, string: comfort) → %s4]. ### %s3"
)
SEED4 = (
    "The route from Berlin to Munich is [PATH(string: Berlin, string: Munich) → %s1]. "
    "Train routes are [FILTER(list: %s1, string: train) → %s2], sorted by distance [SORT(list: %s2, string: distance) → %s3]. "
    "The average travel time is [AVERAGE(list: %s3, string: time) → %s4]. ### The average travel time is %s4."
)
TYPE_ERROR = (
    "Lisbon to Porto [PATH(string: Lisbon, string: Porto) → %s1] costs [GET_COST(path: %s1) → %s2]; "
    "sorted [SORT(list: %s1, string: price) → %s3] and averaged [AVERAGE(list: %s3, string: price) → %s4]. ### %s2"
)


def scored(name, h):
    return ScoredInstance(Instance(name, "q", "r", ("A",)), h, 1)


# -- perplexity ---------------------------------------------------------------

def test_perplexity_examples():
    for n in (1, 2, 7, 100, 1001):
        assert perplexity(TokenLogProbs(["t"] * n, [math.log(0.5)] * n)) == 2.0
    assert perplexity(TokenLogProbs(["a", "b"], [0.0, 0.0])) == 1.0
    assert perplexity(TokenLogProbs(["a", "b"], [-1.0, -3.0])) == pytest.approx(math.exp(2), abs=1e-12)
    with pytest.raises(ValueError):
        perplexity(TokenLogProbs([], []))


lps = st.lists(st.floats(-15, 0), min_size=1, max_size=30)


@settings(max_examples=200)
@given(lps, lps)
def test_perplexity_of_concatenation(a, b):
    x, y = TokenLogProbs(["t"] * len(a), a), TokenLogProbs(["t"] * len(b), b)
    mixed = (len(a) * math.log(perplexity(x)) + len(b) * math.log(perplexity(y))) / (len(a) + len(b))
    assert math.log(perplexity(x + y)) == pytest.approx(mixed, abs=1e-9)


# -- selection ----------------------------------------------------------------

def test_filter_examples():
    data = [scored(f"i{k}", float(k)) for k in range(10)]
    assert [s.instance.id for s in filter_high_perplexity(data, 20)] == ["i9", "i8"]
    assert len(filter_high_perplexity(data, 100)) == 10
    ties = [scored(n, 3.0) for n in ("c", "a", "d", "b")]
    assert [s.instance.id for s in filter_high_perplexity(ties, 50)] == ["a", "b"]
    with pytest.raises(ValueError):
        filter_high_perplexity([], 20)


@settings(max_examples=200)
@given(st.lists(st.floats(1, 50), min_size=1, max_size=60), st.integers(0, 1000).map(lambda t: t / 10))
def test_filter_size_and_subset(hs, sigma):
    data = [scored(f"i{k:03d}", h) for k, h in enumerate(hs)]
    picked = filter_high_perplexity(data, sigma)
    assert len(picked) == min(math.ceil(Fraction(str(sigma)) * len(data) / 100), len(data))
    assert all(p in data for p in picked)
    cutoff = min((p.perplexity for p in picked), default=math.inf)
    assert all(d.perplexity <= cutoff for d in data if d not in picked)


def test_selection_size_exact():
    assert selection_size(100, 20) == 20
    assert selection_size(10, 20) == 2
    assert selection_size(7, 20) == 2
    assert selection_size(3, 0.1) == 1
    assert selection_size(5, 0) == 0


# -- prompt -----------------------------------------------------------------

def test_prompt_sections_in_order(meeting_store):
    seed = Instance("m", MEETING_QUERY, MEETING_RESPONSE, ("SCHEDULE", "EMAIL"))
    tools = [meeting_store["SCHEDULE"], meeting_store["EMAIL"]]
    prompt = build_selfinstruct_prompt(seed, tools, tools_range=(1, 7))
    marks = [
        "### You can use the following APIs:",
        meeting_store["SCHEDULE"].demonstration,
        meeting_store["EMAIL"].demonstration,
        "### Here are some usage examples:",
        f"Query 1: {MEETING_QUERY}",
        f"Response 1: {MEETING_RESPONSE}",
        "extra five queries",
        "Each query involves four tools at least.",
    ]
    positions = [prompt.index(m) for m in marks]
    assert positions == sorted(positions)


def test_prompt_errors(meeting_store, nav_store):
    seed = Instance("m", MEETING_QUERY, MEETING_RESPONSE, ("SCHEDULE",))
    with pytest.raises(ValueError):
        build_selfinstruct_prompt(seed, [])
    with pytest.raises(ValueError, match="between 5 and 7"):
        build_selfinstruct_prompt(seed, [meeting_store["SCHEDULE"]])
    broken = Instance("b", "q", "[PATH(", ("PATH",))
    with pytest.raises(ValueError, match="does not parse"):
        build_selfinstruct_prompt(broken, [nav_store[n] for n in nav_store.names()[:5]])


def test_prompts_differ_only_in_examples(nav_store):
    tools = [nav_store[n] for n in nav_store.names()[:6]]
    a = build_selfinstruct_prompt(Instance("a", "first query", NAV_GOLD, ("PATH",)), tools)
    b = build_selfinstruct_prompt(Instance("b", "second query", CLEAN, ("PATH",)), tools)
    head = "### Here are some usage examples:"
    tail = "Please come up with"
    assert a.split(head)[0] == b.split(head)[0]
    assert a[a.index(tail):] == b[b.index(tail):]
    assert a != b


# -- generator output ---------------------------------------------------------

def test_parse_generated():
    text = "Query 1: first\nResponse 1: one\n\nQuery 2: second\nResponse 2: two"
    assert parse_generated(text) == [("first", "one"), ("second", "two")]
    assert parse_generated("nothing here") == [None]
    assert parse_generated("Query 1: lonely\nQuery 2: q\nResponse 2: r") == [None, ("q", "r")]
    assert parse_generated("Query 1: q\nResponse 2: r") == [None, None]


# -- quality gates ------------------------------------------------------------

def candidate(response, name="c"):
    return Instance(name, "a new query", response, ())


def test_validate_instance_gates(nav_store):
    pool = [Instance("p", "q", SEED4, ("PATH",))]
    assert validate_instance(candidate(SEED4), nav_store, pool).reason == "duplicate"
    # a 3-tool copy fails the tool-count gate before dedup is consulted
    assert validate_instance(candidate(NAV_GOLD), nav_store, [candidate(NAV_GOLD)]).reason == "too_few_tools"
    assert validate_instance(candidate(THREE_TOOLS), nav_store, pool).reason == "too_few_tools"
    assert validate_instance(candidate(TYPE_ERROR), nav_store, pool).reason == "type_error"
    assert validate_instance(candidate("[PATH(string: a"), nav_store, pool).reason == "parse_error"
    unbound = CLEAN.replace("(path: %s3)", "(path: %s8)")
    assert validate_instance(candidate(unbound), nav_store, pool).reason == "type_error"
    verdict = validate_instance(candidate(CLEAN), nav_store, pool)
    assert verdict.accepted and verdict.reason is None


def test_clean_instance_by_hand(nav_store):
    # the accepted instance clears each gate when the primitives are run directly
    from toolcurriculum.callgraph import parse_response, validate_calls

    g = parse_response(CLEAN)
    assert g.errors == []
    assert validate_calls(g, nav_store).ok
    assert len(set(g.tool_names())) == 4
    assert rouge_l(tokenize(CLEAN), tokenize(SEED4)) < 0.7


def test_dedup_threshold_boundary(nav_store):
    pool = [Instance("p", "q", CLEAN, ("PATH",))]
    variant = CLEAN.replace("Your ticket is", "Here is the ticket")
    score = rouge_l(tokenize(variant), tokenize(CLEAN))
    at = IsifConfig(dedup_threshold=score)
    above = IsifConfig(dedup_threshold=min(1.0, score + 1e-6))
    assert validate_instance(candidate(variant), nav_store, pool, at).reason == "duplicate"
    assert validate_instance(candidate(variant), nav_store, pool, above).accepted


def test_config_validation():
    with pytest.raises(ValueError):
        IsifConfig(sigma_percent=150)
    with pytest.raises(ValueError):
        IsifConfig(dedup_threshold=0)
    with pytest.raises(ValueError, match="unknown ISIF settings"):
        IsifConfig.from_mapping({"nope": 1})
    cfg = IsifConfig.from_mapping({"score_stage": "warm_up", "tools_per_prompt": [5, 6]})
    assert cfg.score_stage is Stage.WARM_UP and cfg.tools_per_prompt == (5, 6)


# -- full step ------------------------------------------------------------------

X = "C3_T05"


@pytest.fixture(scope="module")
def corpus():
    from synthetic import synthetic_store

    store = synthetic_store()
    return store, synthetic_instances(store, 100, seed=7, designated=X, designated_count=30), build_index(store)


class Recording:
    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def generate(self, prompt, n=1):
        self.prompts.append(prompt)
        return self.inner.generate(prompt, n)


def test_all_reject_leaves_dataset(corpus):
    store, data, index = corpus
    updated, report = isif_step(data, store, ConstantScorer(), ScriptedGenerator("I have no idea."), index=index)
    assert updated == data
    assert report.accepted_count == 0
    assert report.rejected["parse_error"] == 20
    assert report.warnings and "shortfall" in report.warnings[0]


def test_step_grows_by_sigma_and_targets_x(corpus):
    store, data, index = corpus
    gen = Recording(CooperativeGenerator())
    updated, report = isif_step(data, store, ToolScorer(X), gen, IsifConfig(sigma_percent=20), rng_seed=3, index=index)
    assert len(updated) == 120
    assert updated[:100] == data
    assert report.accepted_count == report.budget == 20
    assert set(report.filtered_ids) <= {i.id for i in data if X in i.gold_tools}
    assert len(gen.prompts) == 20
    assert all(store[X].demonstration in p for p in gen.prompts)
    before = sum(X in i.gold_tools for i in data) / len(data)
    after = sum(X in i.gold_tools for i in updated) / len(updated)
    assert after > before


def test_step_is_deterministic(corpus):
    store, data, index = corpus
    runs = [isif_step(data, store, ToolScorer(X), CooperativeGenerator(), rng_seed=5, index=index) for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].to_json() == runs[1][1].to_json()


def test_accepted_instances_are_mutually_distinct(corpus):
    store, data, index = corpus
    updated, report = isif_step(data, store, ToolScorer(X), CooperativeGenerator(), rng_seed=2, index=index)
    new = updated[len(data):]
    for i, a in enumerate(new):
        pool = data + new[:i]
        assert validate_instance(a, store, pool).accepted
    assert len({i.id for i in updated}) == len(updated)


def test_budget_from_original_size(corpus):
    store, data, index = corpus
    cfg = IsifConfig(budget_base="original")
    _, report = isif_step(data, store, ToolScorer(X), CooperativeGenerator(), cfg, index=index, original_size=50)
    assert report.budget == 10 and report.accepted_count == 10


def test_scoring_under_warm_up_prompt(corpus):
    store, data, _ = corpus
    cfg = IsifConfig(score_stage=Stage.WARM_UP)
    updated, report = isif_step(data[:20], store, ConstantScorer(), CooperativeGenerator(), cfg)
    assert set(report.perplexities.values()) == {2.0}
    assert len(updated) == 24


def test_crafted_batch_rejects(nav_store):
    seeds = [
        Instance(f"s{i}", f"query {i}", SEED4.replace("Berlin", f"City{i}"), ("PATH", "FILTER", "SORT", "AVERAGE"))
        for i in range(5)
    ]
    blocks = [SEED4.replace("Berlin", "City3"), THREE_TOOLS, TYPE_ERROR, CLEAN]
    text = "\n\n".join(f"Query {i}: question {i}\nResponse {i}: {r}" for i, r in enumerate(blocks, 1))
    cfg = IsifConfig(score_stage=Stage.WARM_UP)
    updated, report = isif_step(seeds, nav_store, ConstantScorer(), ScriptedGenerator(text), cfg)
    assert report.accepted_count == 1
    assert {k: v for k, v in report.rejected.items() if v} == {"duplicate": 1, "too_few_tools": 1, "type_error": 1}
    assert updated[-1].response == CLEAN


def test_endpoint_failures_surface_after_retries(corpus):
    store, data, index = corpus

    class Flaky:
        calls = 0

        def score(self, prompt, response):
            Flaky.calls += 1
            raise OSError("connection refused")

    with pytest.raises(EndpointError, match="scoring instance"):
        isif_step(data[:5], store, Flaky(), CooperativeGenerator(), IsifConfig(retries=2, max_workers=1), index=index)
    # three attempts for the failing instance; at most one more instance was already in flight
    assert Flaky.calls in (3, 6)


def test_synthetic_queries_quote_vocabulary(corpus):
    store, data, _ = corpus
    for inst in data[:10]:
        for name in inst.gold_tools:
            assert all(w in inst.query for w in demo_words(store[name]))
