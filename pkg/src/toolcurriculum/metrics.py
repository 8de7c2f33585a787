"""Automatic evaluation: tool selection, parameter correctness,
compositional reasoning and interaction fluency."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .callgraph import CallGraph, parse_response, topological_order, validate_calls
from .dataset import Instance
from .registry import ToolStore

ASPECTS = ("tool_selection", "parameter_correctness", "compositional_reasoning", "interaction_fluency")
ASPECT_TITLES = {
    "tool_selection": "Tool Selection",
    "parameter_correctness": "Parameter Correctness",
    "compositional_reasoning": "Compositional Reasoning",
    "interaction_fluency": "Interaction Fluency",
}


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, dropping punctuation.

    Underscores stay inside words so tool names like GET_COST remain one token.
    """
    return re.findall(r"\w+", text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, cand_total: int, ref_total: int) -> float:
    if cand_total == 0 or ref_total == 0 or overlap == 0:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    return 2 * precision * recall / (precision + recall)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not candidate or not reference:
        return 0.0
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


def tool_selection_ndcg(generated: Sequence[str], gold: Sequence[str]) -> float:
    """NDCG of the generated tool sequence against the gold tool multiset.

    Relevance is binary: a generated tool is relevant if it matches a gold
    occurrence not already consumed by an earlier position.
    """
    if not gold:
        return 1.0 if not generated else 0.0
    remaining = Counter(gold)
    dcg = 0.0
    for rank, name in enumerate(generated, 1):
        if remaining[name] > 0:
            remaining[name] -= 1
            dcg += 1.0 / math.log2(rank + 1)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, len(gold) + 1))
    return dcg / idcg


def parameter_correctness(graph: CallGraph, store: ToolStore, gold: CallGraph | None = None) -> float:
    """Share of calls that pass schema validation without any defect.

    With no generated calls the score is 1.0 only if the gold response has no
    calls either (or no gold is given).
    """
    if not graph.calls:
        if gold is None:
            return 1.0
        return 1.0 if not gold.calls else 0.0
    report = validate_calls(graph, store)
    return report.valid_count / report.total


def compositional_reasoning(generated: CallGraph, gold: CallGraph) -> float:
    gen_order = topological_order(generated)
    gold_order = topological_order(gold)
    if not gen_order and not gold_order:
        return 1.0
    return rouge_l(gen_order, gold_order)


def interaction_fluency(generated: str, gold: str) -> float:
    cand = tokenize(generated)
    ref = tokenize(gold)
    return (rouge_n(cand, ref, 1) + rouge_n(cand, ref, 2) + rouge_l(cand, ref)) / 3.0


@dataclass
class InstanceScores:
    id: str
    tool_selection: float
    parameter_correctness: float
    compositional_reasoning: float
    interaction_fluency: float

    def values(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, a) for a in ASPECTS)


@dataclass
class EvalReport:
    tool_selection: float
    parameter_correctness: float
    compositional_reasoning: float
    interaction_fluency: float
    per_instance: list[InstanceScores] = field(default_factory=list)

    def aggregates(self) -> dict[str, float]:
        return {a: getattr(self, a) for a in ASPECTS}

    def to_json(self) -> str:
        payload = {
            "aggregates": self.aggregates(),
            "aggregates_x100": {a: round(v * 100, 2) for a, v in self.aggregates().items()},
            "per_instance": {
                "id": [s.id for s in self.per_instance],
                **{a: [getattr(s, a) for s in self.per_instance] for a in ASPECTS},
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        cols = data["per_instance"]
        rows = [
            InstanceScores(cols["id"][i], *(cols[a][i] for a in ASPECTS))
            for i in range(len(cols["id"]))
        ]
        return cls(**data["aggregates"], per_instance=rows)

    def table(self, label: str = "Model") -> str:
        """Fixed-width table with scores scaled to 0-100."""
        heads = [ASPECT_TITLES[a] for a in ASPECTS]
        widths = [max(len(h), 6) for h in heads]
        name_w = max(len("Method"), len(label))
        line = "  ".join(["Method".ljust(name_w)] + [h.rjust(w) for h, w in zip(heads, widths)])
        row = "  ".join(
            [label.ljust(name_w)]
            + [f"{getattr(self, a) * 100:.2f}".rjust(w) for a, w in zip(ASPECTS, widths)]
        )
        rule = "-" * len(line)
        return "\n".join([rule, line, rule, row, rule]) + "\n"

    def tsv(self) -> str:
        lines = ["id\t" + "\t".join(ASPECTS)]
        for s in self.per_instance:
            lines.append(s.id + "\t" + "\t".join(f"{v:.6f}" for v in s.values()))
        lines.append("MEAN\t" + "\t".join(f"{getattr(self, a):.6f}" for a in ASPECTS))
        return "\n".join(lines) + "\n"


def score_instance(generated: str, instance: Instance, store: ToolStore) -> InstanceScores:
    gen_graph = parse_response(generated)
    gold_graph = parse_response(instance.response)
    return InstanceScores(
        id=instance.id,
        tool_selection=tool_selection_ndcg(gen_graph.tool_names(), gold_graph.tool_names()),
        parameter_correctness=parameter_correctness(gen_graph, store, gold_graph),
        compositional_reasoning=compositional_reasoning(gen_graph, gold_graph),
        interaction_fluency=interaction_fluency(generated, instance.response),
    )


def evaluate_dataset(
    pairs: Iterable[tuple[str, Instance]], store: ToolStore, workers: int = 1
) -> EvalReport:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty evaluation set")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda p: score_instance(p[0], p[1], store), pairs))
    else:
        rows = [score_instance(gen, inst, store) for gen, inst in pairs]
    means = {a: math.fsum(getattr(r, a) for r in rows) / len(rows) for a in ASPECTS}
    return EvalReport(**means, per_instance=rows)

