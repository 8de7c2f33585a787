"""Iterative self-instruct driven by the model's own perplexity.

One update step scores every training response under the current model,
keeps the highest-perplexity share of the data, asks a generator for new
instances built around exactly those examples and their tools, filters the
generations, and appends the survivors.  Original instances are never
removed or edited.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Any, Callable, Protocol, Sequence, TypeVar

from .callgraph import parse_response, validate_calls
from .curriculum import Stage, TokenLogProbs, assemble_stage
from .dataset import Instance
from .metrics import rouge_l, tokenize
from .registry import ToolSchema, ToolStore, ToolStoreError
from .retriever import ToolIndex, build_index
from .transport import EndpointError

log = logging.getLogger(__name__)

REJECT_REASONS = ("parse_error", "type_error", "too_few_tools", "duplicate")

DEFAULT_SELFINSTRUCT_INSTRUCTION = (
    "You are an intelligent assistant with various tools.\n"
    "Propose realistic user tasks and solve each one with the tools listed below."
)

_NUMBER_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
    6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten",
}

T = TypeVar("T")


class Scorer(Protocol):
    def score(self, prompt: str, response: str) -> TokenLogProbs: ...


class Generator(Protocol):
    def generate(self, prompt: str, n: int = 1) -> list[str]: ...


@dataclass
class IsifConfig:
    sigma_percent: float = 20.0
    min_tools_per_instance: int = 4
    dedup_threshold: float = 0.7
    tools_per_prompt: tuple[int, int] = (5, 7)
    k_retrieval: int = 10
    queries_per_prompt: int = 5
    completions_per_prompt: int = 1
    # which candidate set conditions the perplexity score
    score_stage: Stage = Stage.CROSS_CATEGORY
    # "current": budget from the dataset handed to this step; "original": from original_size
    budget_base: str = "current"
    max_workers: int = 4
    retries: int = 2
    instruction: str = DEFAULT_SELFINSTRUCT_INSTRUCTION

    def __post_init__(self):
        self.tools_per_prompt = tuple(self.tools_per_prompt)
        self.score_stage = Stage(self.score_stage)
        if not 0 < self.sigma_percent <= 100:
            raise ValueError("sigma_percent must be in (0, 100]")
        if self.min_tools_per_instance < 1:
            raise ValueError("min_tools_per_instance must be >= 1")
        if not 0 < self.dedup_threshold <= 1:
            raise ValueError("dedup_threshold must be in (0, 1]")
        lo, hi = self.tools_per_prompt
        if not 1 <= lo <= hi:
            raise ValueError("tools_per_prompt must satisfy 1 <= min <= max")
        if self.k_retrieval < 1 or self.queries_per_prompt < 1 or self.completions_per_prompt < 1:
            raise ValueError("k_retrieval, queries_per_prompt and completions_per_prompt must be >= 1")
        if self.budget_base not in ("current", "original"):
            raise ValueError("budget_base must be 'current' or 'original'")
        if self.max_workers < 1 or self.retries < 0:
            raise ValueError("max_workers must be >= 1 and retries >= 0")

    @classmethod
    def from_mapping(cls, data: dict) -> "IsifConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ISIF settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ScoredInstance:
    instance: Instance
    perplexity: float
    response_token_count: int


def perplexity(scored: TokenLogProbs) -> float:
    """exp of the mean negative token log-probability."""
    if len(scored) == 0:
        raise ValueError("empty token list")
    lps = scored.logprobs
    # offset by the first value so constant sequences average exactly
    mean = lps[0] + math.fsum(x - lps[0] for x in lps) / len(lps)
    return math.exp(-mean)


def selection_size(n: int, sigma_percent: float) -> int:
    """ceil(sigma% of n), computed on exact fractions, capped at n."""
    share = Fraction(sigma_percent).limit_denominator(10**9)
    return min(n, math.ceil(share * n / 100))


def filter_high_perplexity(dataset: Sequence[ScoredInstance], sigma_percent: float) -> list[ScoredInstance]:
    """The top sigma% by perplexity, ties broken by ascending instance id."""
    if not dataset:
        raise ValueError("empty dataset")
    ranked = sorted(dataset, key=lambda s: (-s.perplexity, s.instance.id))
    return ranked[: selection_size(len(dataset), sigma_percent)]


def _number(n: int) -> str:
    return _NUMBER_WORDS.get(n, str(n))


def build_selfinstruct_prompt(
    seed_instance: Instance,
    tools: Sequence[ToolSchema],
    instruction: str = DEFAULT_SELFINSTRUCT_INSTRUCTION,
    tools_range: tuple[int, int] = (5, 7),
    queries: int = 5,
    min_tools: int = 4,
) -> str:
    lo, hi = tools_range
    if not tools or not lo <= len(tools) <= hi:
        raise ValueError(f"need between {lo} and {hi} tools, got {len(tools)}")
    if parse_response(seed_instance.response).errors:
        raise ValueError(f"seed instance {seed_instance.id} does not parse")
    demos = "\n\n".join(t.demonstration for t in tools)
    return (
        f"### {instruction}\n\n"
        f"### You can use the following APIs:\n\n{demos}\n\n"
        f"### Here are some usage examples:\n\n"
        f"Query 1: {seed_instance.query}\n\n"
        f"Response 1: {seed_instance.response}\n\n"
        f"Please come up with extra {_number(queries)} queries and use the tools to solve them step-by-step.\n"
        f"Each query involves {_number(min_tools)} tools at least."
    )


_BLOCK = re.compile(r"^[ \t]*(Query|Response)[ \t]*(\d+)[ \t]*:", re.M | re.I)


def parse_generated(text: str) -> list[tuple[str, str] | None]:
    """Split generator output into (query, response) pairs.

    Blocks are ``Query i:`` followed by ``Response i:``; a block that cannot be
    paired shows up as ``None``.  Output with no blocks at all is one ``None``.
    """
    marks = list(_BLOCK.finditer(text))
    if not marks:
        return [None]
    parts = []
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        parts.append((m.group(1).lower(), int(m.group(2)), text[m.end():end].strip()))
    out: list[tuple[str, str] | None] = []
    i = 0
    while i < len(parts):
        kind, num, body = parts[i]
        nxt = parts[i + 1] if i + 1 < len(parts) else None
        if kind == "query" and nxt and nxt[0] == "response" and nxt[1] == num and body and nxt[2]:
            out.append((body, nxt[2]))
            i += 2
        else:
            out.append(None)
            i += 1
    return out


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None


class _DedupPool:
    """Response token sequences of the pool, with a cheap unigram bound before LCS."""

    def __init__(self, instances: Sequence[Instance]):
        self._entries: list[tuple[list[str], Counter]] = []
        for inst in instances:
            self.add(inst)

    def add(self, inst: Instance) -> None:
        toks = tokenize(inst.response)
        self._entries.append((toks, Counter(toks)))

    def max_reaches(self, response: str, threshold: float) -> bool:
        cand = tokenize(response)
        if not cand:
            return False
        counts = Counter(cand)
        for toks, ref_counts in self._entries:
            if not toks:
                continue
            denom = len(cand) + len(toks)
            # LCS <= unigram overlap, so this bounds ROUGE-L F1 from above
            if 2 * sum((counts & ref_counts).values()) / denom < threshold - 1e-9:
                continue
            if rouge_l(cand, toks) >= threshold:
                return True
        return False


def _check(candidate: Instance, store: ToolStore, pool: _DedupPool, config: IsifConfig) -> Verdict:
    graph = parse_response(candidate.response)
    if graph.errors:
        return Verdict(False, "parse_error")
    if not validate_calls(graph, store).ok:
        return Verdict(False, "type_error")
    if len(set(graph.tool_names())) < config.min_tools_per_instance:
        return Verdict(False, "too_few_tools")
    if pool.max_reaches(candidate.response, config.dedup_threshold):
        return Verdict(False, "duplicate")
    return Verdict(True)


def validate_instance(
    candidate: Instance, store: ToolStore, pool: Sequence[Instance], config: IsifConfig | None = None
) -> Verdict:
    """Quality gates, first failure wins: parse errors, schema defects,
    too few distinct tools, ROUGE-L against the pool at or above threshold."""
    return _check(candidate, store, _DedupPool(pool), config or IsifConfig())


def pick_prompt_tools(
    store: ToolStore, instance: Instance, rng: random.Random, bounds: tuple[int, int] = (5, 7)
) -> list[ToolSchema]:
    """Tools for one self-instruct prompt.

    The instance's own gold tools go in first, then tools sharing their
    categories, then a uniform fill from the whole store.
    """
    lo, hi = bounds
    if len(store) < lo:
        raise ToolStoreError(f"store has {len(store)} tools, fewer than {lo}")
    size = rng.randint(lo, min(hi, len(store)))
    gold = [g for g in dict.fromkeys(instance.gold_tools) if g in store]
    rng.shuffle(gold)
    chosen = gold[:size]
    categories = {store[g].category for g in gold}
    for pool in (
        [n for n in store.names() if store[n].category in categories and n not in chosen],
        [n for n in store.names() if n not in chosen],
    ):
        rng.shuffle(pool)
        for name in pool:
            if len(chosen) >= size:
                break
            if name not in chosen:
                chosen.append(name)
    rng.shuffle(chosen)
    return [store[n] for n in chosen]


@dataclass
class UpdateReport:
    scored_count: int = 0
    filtered_count: int = 0
    generated_count: int = 0
    accepted_count: int = 0
    rejected: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REJECT_REASONS})
    appended_ids: list[str] = field(default_factory=list)
    filtered_ids: list[str] = field(default_factory=list)
    budget: int = 0
    surplus_count: int = 0
    warnings: list[str] = field(default_factory=list)
    perplexities: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _with_retries(fn: Callable[[], T], retries: int, what: str) -> T:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return fn()
        except Exception as exc:  # transport errors of any flavour are retryable
            last = exc
            log.warning("%s failed (attempt %d/%d): %s", what, attempt + 1, retries + 1, exc)
    raise EndpointError(f"{what}: {last}") from last


def _fresh_id(base: str, taken: set[str], counter: Counter) -> str:
    while True:
        counter[base] += 1
        candidate = f"{base}+g{counter[base]}"
        if candidate not in taken:
            taken.add(candidate)
            return candidate


def _ordered_map(fn: Callable[[Any], T], items: Sequence, workers: int) -> list[T]:
    """Thread-pool map in input order that drops queued work after the first failure."""
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        futures = [pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]
    finally:
        pool.shutdown(wait=True, cancel_futures=True)


def score_dataset(
    dataset: Sequence[Instance],
    store: ToolStore,
    scorer: Scorer,
    config: IsifConfig,
    index: ToolIndex | None = None,
    rng_seed: int = 0,
) -> list[ScoredInstance]:
    examples = assemble_stage(
        dataset, config.score_stage, store, index, k=config.k_retrieval, rng_seed=rng_seed
    )

    def score_one(ex) -> ScoredInstance:
        inst = ex.instance
        lp = _with_retries(
            lambda: scorer.score(ex.prompt, inst.response), config.retries, f"scoring instance {inst.id}"
        )
        if len(lp) == 0:
            raise EndpointError(f"scoring instance {inst.id}: scorer returned no tokens")
        return ScoredInstance(inst, perplexity(lp), len(lp))

    return _ordered_map(score_one, examples, config.max_workers)


def isif_step(
    dataset: Sequence[Instance],
    store: ToolStore,
    scorer: Scorer,
    generator: Generator,
    config: IsifConfig | None = None,
    rng_seed: int = 0,
    index: ToolIndex | None = None,
    original_size: int | None = None,
) -> tuple[list[Instance], UpdateReport]:
    """Run one score / filter / generate / validate / append round."""
    config = config or IsifConfig()
    if not dataset:
        raise ValueError("empty dataset")
    if index is None and config.score_stage is Stage.CROSS_CATEGORY:
        index = build_index(store)
    report = UpdateReport()

    scored = score_dataset(dataset, store, scorer, config, index, rng_seed)
    report.scored_count = len(scored)
    report.perplexities = {s.instance.id: s.perplexity for s in scored}
    hard = filter_high_perplexity(scored, config.sigma_percent)
    report.filtered_count = len(hard)
    report.filtered_ids = [s.instance.id for s in hard]

    base = len(dataset)
    if config.budget_base == "original":
        base = original_size if original_size is not None else len(dataset)
    report.budget = selection_size(base, config.sigma_percent)

    prompts = []
    for s in hard:
        rng = random.Random(f"{rng_seed}:selfinstruct:{s.instance.id}")
        tools = pick_prompt_tools(store, s.instance, rng, config.tools_per_prompt)
        prompts.append(
            build_selfinstruct_prompt(
                s.instance,
                tools,
                config.instruction,
                config.tools_per_prompt,
                config.queries_per_prompt,
                config.min_tools_per_instance,
            )
        )

    def generate_one(i: int) -> list[str]:
        return _with_retries(
            lambda: generator.generate(prompts[i], config.completions_per_prompt),
            config.retries,
            f"generating from instance {hard[i].instance.id}",
        )

    completions = _ordered_map(generate_one, range(len(prompts)), config.max_workers)

    # single ordered commit phase so every dedup check sees the pool as it stands
    updated = list(dataset)
    dedup = _DedupPool(updated)
    taken = {inst.id for inst in updated}
    counter: Counter = Counter()
    for s, outputs in zip(hard, completions):
        seed = s.instance
        for text in outputs:
            for block in parse_generated(text):
                if report.accepted_count >= report.budget:
                    report.surplus_count += 1
                    continue
                report.generated_count += 1
                if block is None:
                    report.rejected["parse_error"] += 1
                    continue
                query, response = block
                graph = parse_response(response)
                candidate = Instance(
                    id=_fresh_id(seed.id, taken, counter),
                    query=query,
                    response=response,
                    gold_tools=tuple(dict.fromkeys(graph.tool_names())),
                    category_hint=seed.category_hint,
                )
                verdict = _check(candidate, store, dedup, config)
                if verdict.accepted:
                    updated.append(candidate)
                    dedup.add(candidate)
                    report.accepted_count += 1
                    report.appended_ids.append(candidate.id)
                else:
                    report.rejected[verdict.reason] += 1
    if report.accepted_count < report.budget:
        msg = f"budget shortfall: accepted {report.accepted_count} of {report.budget}"
        report.warnings.append(msg)
        log.warning(msg)
    return updated, report
