"""Three-stage curriculum: candidate toolsets, prompts, and exact NLL losses.

Stages go from easy to hard:

* warm-up: the prompt lists exactly the gold tools;
* in-category: gold tools plus distractors drawn from the gold tools' categories;
* cross-category: gold tools plus the retriever's top-k for the query.

Every stage uses the same loss, the negative log-likelihood of the gold
response; only the candidate list baked into the prompt changes.  Gradient
updates belong to an external trainer that consumes the plan files.
"""

from __future__ import annotations

import json
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .dataset import Instance
from .registry import ToolSchema, ToolStore
from .retriever import DEFAULT_K, ToolIndex, retrieve

log = logging.getLogger(__name__)

DEFAULT_DISTRACTORS = 5
DEFAULT_INSTRUCTION = (
    "You are an intelligent assistant with various tools. Select the tools you need "
    "from the APIs below and answer the query step by step, writing every call as "
    "[TOOL(key: value, ...) → %sN] and the final answer after ###."
)


class Stage(str, Enum):
    WARM_UP = "warm_up"
    IN_CATEGORY = "in_category"
    CROSS_CATEGORY = "cross_category"


STAGE_ORDER = (Stage.WARM_UP, Stage.IN_CATEGORY, Stage.CROSS_CATEGORY)


class CurriculumError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLogProbs:
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        if len(self.tokens) != len(self.logprobs):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.logprobs)} logprobs")
        for lp in self.logprobs:
            if not lp <= 0.0:
                raise ValueError(f"log-probability {lp} is not <= 0")

    def __len__(self) -> int:
        return len(self.logprobs)

    def __add__(self, other: "TokenLogProbs") -> "TokenLogProbs":
        return TokenLogProbs(self.tokens + other.tokens, self.logprobs + other.logprobs)


def nll_loss(scored: TokenLogProbs) -> float:
    """-sum of token log-probabilities of the response."""
    if len(scored) == 0:
        raise ValueError("empty token list")
    return -math.fsum(scored.logprobs)


@dataclass(frozen=True)
class CurriculumExample:
    instance: Instance
    stage: Stage
    candidates: tuple[str, ...]
    prompt: str

    def to_record(self, epoch: int | None = None) -> dict:
        record = {
            "id": self.instance.id,
            "stage": self.stage.value,
            "candidates": list(self.candidates),
            "prompt": self.prompt,
            "response": self.instance.response,
        }
        if epoch is not None:
            record["epoch"] = epoch
        return record


def render_prompt(query: str, tools: Sequence[ToolSchema], instruction: str = DEFAULT_INSTRUCTION) -> str:
    demos = "\n\n".join(t.demonstration for t in tools)
    return (
        f"### {instruction}\n\n"
        f"### You can use the following APIs:\n\n{demos}\n\n"
        f"### Query: {query}\n\n"
        f"### Response:"
    )


def _unique(names: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for n in names:
        seen.setdefault(n, None)
    return list(seen)


def candidate_set(
    instance: Instance,
    stage: Stage,
    store: ToolStore,
    rng: random.Random,
    index: ToolIndex | None = None,
    distractor_count: int = DEFAULT_DISTRACTORS,
    k: int = DEFAULT_K,
) -> list[str]:
    gold = _unique(instance.gold_tools)
    for name in gold:
        if name not in store:
            raise CurriculumError(f"instance {instance.id}: unknown gold tool {name}")
    if stage is Stage.WARM_UP:
        extra: list[str] = []
    elif stage is Stage.IN_CATEGORY:
        categories = {store[g].category for g in gold}
        pool = sorted(
            n for n in store.names() if store[n].category in categories and n not in gold
        )
        if len(pool) < distractor_count:
            log.warning(
                "instance %s: only %d same-category distractors available (wanted %d)",
                instance.id, len(pool), distractor_count,
            )
            extra = pool
        else:
            extra = rng.sample(pool, distractor_count)
    elif stage is Stage.CROSS_CATEGORY:
        if index is None:
            raise CurriculumError("cross-category assembly needs a tool index")
        extra = [name for name, _ in retrieve(index, instance.query, k)]
    else:
        raise CurriculumError(f"unknown stage {stage!r}")
    candidates = _unique(gold + extra)
    rng.shuffle(candidates)
    return candidates


def assemble_stage(
    instances: Sequence[Instance],
    stage: Stage | str,
    store: ToolStore,
    index: ToolIndex | None = None,
    distractor_count: int = DEFAULT_DISTRACTORS,
    k: int = DEFAULT_K,
    rng_seed: int = 0,
    instruction: str = DEFAULT_INSTRUCTION,
    epoch: int = 0,
    workers: int = 1,
) -> list[CurriculumExample]:
    """Build one :class:`CurriculumExample` per instance, in input order.

    Each instance draws from its own RNG stream keyed by seed, stage, epoch
    and instance id, so results do not depend on batch order or threading.
    """
    stage = Stage(stage)
    if stage is Stage.CROSS_CATEGORY and index is None:
        raise CurriculumError("cross-category assembly needs a tool index")

    def build(inst: Instance) -> CurriculumExample:
        rng = random.Random(f"{rng_seed}:{stage.value}:{epoch}:{inst.id}")
        names = candidate_set(inst, stage, store, rng, index, distractor_count, k)
        prompt = render_prompt(inst.query, [store[n] for n in names], instruction)
        return CurriculumExample(inst, stage, tuple(names), prompt)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, instances))
    return [build(inst) for inst in instances]


@dataclass(frozen=True)
class PlanStep:
    stage: Stage
    epoch: int
    batch: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "epoch": self.epoch, "batch": list(self.batch)}


def stage_schedule(
    dataset: Sequence[Instance],
    epochs: tuple[int, int, int],
    batch_size: int = 8,
    rng_seed: int = 0,
) -> list[PlanStep]:
    """Ordered training plan: all warm-up epochs, then in-category, then cross-category.

    A zero epoch count drops that stage (the ablation setting).
    """
    if len(epochs) != 3 or any(e < 0 for e in epochs):
        raise CurriculumError("epochs must be three non-negative integers")
    if sum(epochs) == 0:
        raise CurriculumError("all stage epoch counts are zero")
    if batch_size < 1:
        raise CurriculumError("batch_size must be >= 1")
    ids = [inst.id for inst in dataset]
    plan: list[PlanStep] = []
    for stage, count in zip(STAGE_ORDER, epochs):
        for epoch in range(count):
            order = list(ids)
            random.Random(f"{rng_seed}:{stage.value}:{epoch}").shuffle(order)
            for start in range(0, len(order), batch_size):
                plan.append(PlanStep(stage, epoch, tuple(order[start:start + batch_size])))
    return plan


def assemble_curriculum(
    instances: Sequence[Instance],
    store: ToolStore,
    index: ToolIndex | None,
    epochs: tuple[int, int, int],
    distractor_count: int = DEFAULT_DISTRACTORS,
    k: int = DEFAULT_K,
    rng_seed: int = 0,
    instruction: str = DEFAULT_INSTRUCTION,
) -> list[tuple[int, CurriculumExample]]:
    """Examples for every (stage, epoch) in curriculum order."""
    if sum(epochs) == 0:
        raise CurriculumError("all stage epoch counts are zero")
    out = []
    for stage, count in zip(STAGE_ORDER, epochs):
        for epoch in range(count):
            examples = assemble_stage(
                instances, stage, store, index, distractor_count, k, rng_seed, instruction, epoch
            )
            out.extend((epoch, ex) for ex in examples)
    return out


def dump_plan(items: Iterable[tuple[int, CurriculumExample]]) -> str:
    return "".join(
        json.dumps(ex.to_record(epoch), ensure_ascii=False, sort_keys=True) + "\n" for epoch, ex in items
    )
