"""Harness for tool-augmented language model research.

Parses bracketed tool calls, scores responses on four aspects, retrieves
candidate tools, assembles a three-stage curriculum, and grows datasets
around high-perplexity examples.  The language model itself sits behind
scorer/generator endpoints.
"""

__version__ = "0.1.0"

from .callgraph import CallGraph, parse_response, render_graph, topological_order, validate_calls
from .curriculum import CurriculumExample, Stage, TokenLogProbs, assemble_stage, nll_loss, stage_schedule
from .dataset import Instance, load_instances
from .isif import (
    IsifConfig,
    ScoredInstance,
    UpdateReport,
    build_selfinstruct_prompt,
    filter_high_perplexity,
    isif_step,
    perplexity,
    validate_instance,
)
from .metrics import (
    EvalReport,
    compositional_reasoning,
    evaluate_dataset,
    interaction_fluency,
    parameter_correctness,
    rouge_l,
    rouge_n,
    tokenize,
    tool_selection_ndcg,
)
from .registry import ToolSchema, ToolStore, load_tool_store, sample_tools, tools_in_category
from .retriever import HashingEmbedder, ToolIndex, build_index, embed_text, recall_at_k, retrieve

__all__ = [
    "CallGraph", "parse_response", "render_graph", "topological_order", "validate_calls",
    "CurriculumExample", "Stage", "TokenLogProbs", "assemble_stage", "nll_loss", "stage_schedule",
    "Instance", "load_instances",
    "IsifConfig", "ScoredInstance", "UpdateReport", "build_selfinstruct_prompt",
    "filter_high_perplexity", "isif_step", "perplexity", "validate_instance",
    "EvalReport", "compositional_reasoning", "evaluate_dataset", "interaction_fluency",
    "parameter_correctness", "rouge_l", "rouge_n", "tokenize", "tool_selection_ndcg",
    "ToolSchema", "ToolStore", "load_tool_store", "sample_tools", "tools_in_category",
    "HashingEmbedder", "ToolIndex", "build_index", "embed_text", "recall_at_k", "retrieve",
]
