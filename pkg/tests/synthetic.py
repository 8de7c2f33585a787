"""Deterministic synthetic stores, datasets and model stubs for the tests."""

from __future__ import annotations

import hashlib
import math
import random
import re
from pathlib import Path

from toolcurriculum.curriculum import TokenLogProbs
from toolcurriculum.dataset import Instance
from toolcurriculum.registry import Param, ToolSchema, ToolStore, read_tool_store

DATA = Path(__file__).parent / "data"

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


def pseudo_words(count: int, seed: int = 0, syllables: int = 3) -> list[str]:
    """Distinct pronounceable nonsense words."""
    rng = random.Random(f"words:{seed}")
    out: dict[str, None] = {}
    while len(out) < count:
        w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables))
        out.setdefault(w, None)
    return list(out)


def load_store(name: str) -> ToolStore:
    return read_tool_store(DATA / f"{name}_tools.jsonl")


def synthetic_store(categories: int = 10, per_category: int = 11, seed: int = 0) -> ToolStore:
    """Tools with two string params, a string result and a private vocabulary each."""
    vocab = pseudo_words(categories * per_category * 4, seed)
    tools = []
    for c in range(categories):
        for t in range(per_category):
            i = c * per_category + t
            words = vocab[4 * i: 4 * i + 4]
            name = f"C{c}_T{t:02d}"
            tools.append(
                ToolSchema(
                    name=name,
                    params=(Param("a", "string"), Param("b", "string")),
                    return_type="string",
                    category=f"cat{c}",
                    demonstration=f"{name}(string: a, string: b) → string: {' '.join(words)}",
                )
            )
    return ToolStore.from_tools(tools)


def demo_words(schema: ToolSchema) -> list[str]:
    return schema.demonstration.split(": ")[-1].split()


def chain_response(names: list[str], rng: random.Random, filler: list[str], words_per_step: int = 8) -> str:
    """A placeholder chain over two-string-argument tools."""
    parts = []
    for i, name in enumerate(names, 1):
        free = " ".join(rng.choice(filler) for _ in range(words_per_step))
        first = f"%s{i - 1}" if i > 1 else rng.choice(filler)
        parts.append(f"{free} [{name}(a: {first}, b: {rng.choice(filler)}) → %s{i}].")
    closing = " ".join(rng.choice(filler) for _ in range(words_per_step))
    return " ".join(parts) + f" ### {closing} %s{len(names)}."


def synthetic_instances(
    store: ToolStore,
    n: int,
    seed: int = 0,
    tools_per_instance: int = 4,
    designated: str | None = None,
    designated_count: int = 0,
) -> list[Instance]:
    """Chains of ``tools_per_instance`` distinct tools from at most two categories.

    The first ``designated_count`` instances use ``designated``; no other does.
    Each query quotes the private vocabulary of its gold tools.
    """
    rng = random.Random(f"instances:{seed}")
    filler = pseudo_words(3000, seed + 1, syllables=2)
    by_cat: dict[str, list[str]] = {}
    for name in store.names():
        if name != designated:
            by_cat.setdefault(store[name].category, []).append(name)
    cats = sorted(by_cat)
    out = []
    for i in range(n):
        two = rng.sample(cats, 2)
        pool = by_cat[two[0]] + by_cat[two[1]]
        names = rng.sample(pool, tools_per_instance)
        if i < designated_count:
            names[rng.randrange(tools_per_instance)] = designated
        query = " ".join(w for name in names for w in demo_words(store[name]))
        out.append(
            Instance(
                id=f"syn{i:04d}",
                query=f"please {query}",
                response=chain_response(names, rng, filler),
                gold_tools=tuple(names),
                category_hint=store[names[0]].category,
            )
        )
    return out


LN_HALF = math.log(0.5)


class ConstantScorer:
    """ln(0.5) for every whitespace token of the response."""

    def score(self, prompt: str, response: str) -> TokenLogProbs:
        toks = response.split()
        return TokenLogProbs(toks, [LN_HALF] * len(toks))


class ToolScorer:
    """High perplexity for responses calling ``tool``, low otherwise."""

    def __init__(self, tool: str, high: float = -3.0, low: float = LN_HALF):
        self.pattern = re.compile(r"\[\s*" + re.escape(tool) + r"\s*\(")
        self.high, self.low = high, low

    def score(self, prompt: str, response: str) -> TokenLogProbs:
        toks = response.split()
        lp = self.high if self.pattern.search(response) else self.low
        return TokenLogProbs(toks, [lp] * len(toks))


_API_LINE = re.compile(r"^([A-Z][A-Z0-9_]*)\(([^)]*)\)", re.M)


def prompt_tools(prompt: str) -> list[str]:
    """Tool names listed in the APIs section of a prompt."""
    start = prompt.index("### You can use the following APIs:")
    end = prompt.find("### Here are some usage examples:", start)
    section = prompt[start: end if end >= 0 else len(prompt)]
    return [m.group(1) for m in _API_LINE.finditer(section)]


class CooperativeGenerator:
    """Answers a self-instruct prompt with valid chains over every listed tool.

    Only suited to stores whose tools take two strings and return a string.
    Output depends only on the prompt text.
    """

    def __init__(self, queries: int = 5):
        self.queries = queries
        self.filler = pseudo_words(5000, 99, syllables=3)

    def generate(self, prompt: str, n: int = 1) -> list[str]:
        names = prompt_tools(prompt)
        digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).hexdigest()
        out = []
        for c in range(n):
            rng = random.Random(f"{digest}:{c}")
            blocks = []
            for q in range(1, self.queries + 1):
                order = list(names)
                rng.shuffle(order)
                query = " ".join(rng.choice(self.filler) for _ in range(10))
                blocks.append(f"Query {q}: {query}\nResponse {q}: {chain_response(order, rng, self.filler)}")
            out.append("\n\n".join(blocks))
        return out


class ScriptedGenerator:
    """Returns the same canned completion for every prompt and records prompts."""

    def __init__(self, text: str):
        self.text = text
        self.prompts: list[str] = []

    def generate(self, prompt: str, n: int = 1) -> list[str]:
        self.prompts.append(prompt)
        return [self.text] * n
