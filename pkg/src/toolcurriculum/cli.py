"""Batch command line: validate, evaluate, build-index, retrieve, assemble, isif-step.

Exit codes: 0 success, 1 validation failure, 2 I/O or configuration error,
3 scorer/generator/embedder endpoint error.

Settings come from built-in defaults, then an optional TOML config file
(``--config``), then command-line flags; flags win.  Config keys use the
flag names with underscores (``seed``, ``k``, ``sigma``, ``scorer_cmd`` ...)
at the top level.  An ``[isif]`` table may set any ISIF option by its field
name (``dedup_threshold``, ``tools_per_prompt``, ``score_stage`` ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .callgraph import parse_response, validate_calls
from .curriculum import CurriculumError, assemble_curriculum, dump_plan, stage_schedule
from .dataset import DatasetError, Instance, read_instances, write_instances
from .isif import IsifConfig, isif_step
from .metrics import evaluate_dataset
from .registry import ToolStoreError, read_tool_store
from .retriever import HashingEmbedder, RetrievalError, ToolIndex, build_index, recall_at_k, retrieve
from .transport import EndpointEmbedder, EndpointError, EndpointGenerator, EndpointScorer, open_endpoint

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("toolcurriculum")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_ENDPOINT = 0, 1, 2, 3
DEFAULT_SEED = 13

DEFAULTS = {
    "k": 10,
    "seed": DEFAULT_SEED,
    "sigma": 20.0,
    "epochs": "1,1,1",
    "distractors": 5,
    "dim": 256,
    "batch_size": 8,
    "label": "Model",
    "min_tools": 4,
}


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _settings(args: argparse.Namespace) -> dict:
    cfg = _load_config(args.config)
    merged = dict(DEFAULTS)
    merged.update({k: v for k, v in cfg.items() if not isinstance(v, dict)})
    merged.update({k: v for k, v in vars(args).items() if v is not None and k not in ("config", "func")})
    merged["_isif"] = cfg.get("isif", {})
    return merged


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if not settings.get(k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    for key in keys:
        if key in ("store", "dataset", "predictions", "index") and not Path(settings[key]).exists():
            raise UsageError(f"{key} file not found: {settings[key]}")


def _out_dir(settings: dict) -> Path:
    _require(settings, "out")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _embedder(settings: dict):
    cmd, url = settings.get("embed_cmd"), settings.get("embed_url")
    if cmd or url:
        return EndpointEmbedder(open_endpoint(cmd, url, handshake=bool(cmd)))
    return HashingEmbedder(int(settings["dim"]))


def _index(settings: dict, store):
    path = settings.get("index")
    if path:
        if not Path(path).exists():
            raise UsageError(f"index file not found: {path}")
        provider = None
        if settings.get("embed_cmd") or settings.get("embed_url"):
            provider = _embedder(settings)
        index = ToolIndex.from_json(Path(path).read_text(encoding="utf-8"), provider)
        if sorted(index.names) != store.names():
            raise UsageError("index entries do not match the tool store")
        return index
    return build_index(store, _embedder(settings))


def _parse_epochs(text) -> tuple[int, int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    try:
        epochs = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad --epochs {text!r}; expected three integers like 1,1,1") from None
    if len(epochs) != 3:
        raise UsageError(f"bad --epochs {text!r}; expected three integers like 1,1,1")
    return epochs


def _instance_gate(inst: Instance, store, min_tools: int) -> str | None:
    graph = parse_response(inst.response)
    if graph.errors:
        return "parse_error"
    if not validate_calls(graph, store).ok:
        return "type_error"
    if len(set(graph.tool_names())) < min_tools:
        return "too_few_tools"
    return None


def cmd_validate(settings: dict) -> int:
    _require(settings, "dataset", "store")
    store = read_tool_store(settings["store"])
    dataset = read_instances(settings["dataset"])
    counts = Counter({"parse_error": 0, "type_error": 0, "too_few_tools": 0})
    failures = []
    for inst in dataset:
        reason = _instance_gate(inst, store, int(settings["min_tools"]))
        if reason:
            counts[reason] += 1
            failures.append((inst.id, reason))
    print(f"instances: {len(dataset)}")
    print(f"valid: {len(dataset) - len(failures)}")
    for reason in ("parse_error", "type_error", "too_few_tools"):
        print(f"{reason}: {counts[reason]}")
    for inst_id, reason in failures[:20]:
        print(f"  {inst_id}\t{reason}")
    return EXIT_OK if not failures else EXIT_INVALID


def _read_predictions(path) -> dict[str, str]:
    preds: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                preds[str(record["id"])] = str(record["response"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path} line {lineno}: expected {{\"id\", \"response\"}} ({exc})") from exc
    return preds


def cmd_evaluate(settings: dict) -> int:
    from .plotting import plot_eval_report

    _require(settings, "predictions", "dataset", "store")
    store = read_tool_store(settings["store"])
    dataset = read_instances(settings["dataset"])
    preds = _read_predictions(settings["predictions"])
    missing = [i.id for i in dataset if i.id not in preds]
    if missing:
        raise UsageError(f"no prediction for instance id {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = sorted(set(preds) - {i.id for i in dataset})
    if extra:
        raise UsageError(f"prediction for unknown instance id {extra[0]}")
    report = evaluate_dataset([(preds[i.id], i) for i in dataset], store)
    out = _out_dir(settings)
    table = report.table(settings["label"])
    _write(out / "eval_report.json", report.to_json())
    _write(out / "eval_table.txt", table)
    _write(out / "eval_scores.tsv", report.tsv())
    plot_eval_report(report, out / "eval_report.png", settings["label"])
    print(table, end="")
    return EXIT_OK


def cmd_build_index(settings: dict) -> int:
    _require(settings, "store", "out")
    store = read_tool_store(settings["store"])
    index = build_index(store, _embedder(settings))
    out = Path(settings["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _write(out, index.to_json())
    print(f"indexed {len(index)} tools (dim {index.dim}) -> {out}")
    return EXIT_OK


def cmd_retrieve(settings: dict) -> int:
    from .plotting import plot_recall_curve

    _require(settings, "store", "dataset")
    store = read_tool_store(settings["store"])
    dataset = read_instances(settings["dataset"])
    index = _index(settings, store)
    k = int(settings["k"])
    out = _out_dir(settings)
    lines = []
    for inst in dataset:
        hits = retrieve(index, inst.query, k)
        lines.append(json.dumps({"id": inst.id, "candidates": [{"name": n, "score": s} for n, s in hits]}))
    _write(out / "retrieval.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    with_gold = [i for i in dataset if i.gold_tools]
    summary = {"k": k, "instances": len(dataset)}
    if with_gold:
        ks = list(range(1, k + 1))
        curve = [recall_at_k(index, with_gold, kk) for kk in ks]
        summary["recall_at_k"] = curve[-1]
        summary["recall_curve"] = dict(zip(map(str, ks), curve))
        plot_recall_curve(ks, curve, out / "retrieval_recall.png")
        print(f"recall@{k}: {curve[-1] * 100:.2f}")
    _write(out / "retrieval_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_assemble(settings: dict) -> int:
    _require(settings, "store", "dataset")
    store = read_tool_store(settings["store"])
    dataset = read_instances(settings["dataset"])
    epochs = _parse_epochs(settings["epochs"])
    index = _index(settings, store) if epochs[2] > 0 else None
    seed = int(settings["seed"])
    items = assemble_curriculum(
        dataset, store, index, epochs,
        distractor_count=int(settings["distractors"]), k=int(settings["k"]), rng_seed=seed,
    )
    plan = stage_schedule(dataset, epochs, batch_size=int(settings["batch_size"]), rng_seed=seed)
    out = _out_dir(settings)
    _write(out / "curriculum.jsonl", dump_plan(items))
    _write(
        out / "plan.json",
        json.dumps({"epochs": list(epochs), "seed": seed, "steps": [p.to_dict() for p in plan]}, indent=2) + "\n",
    )
    stages = Counter(ex.stage.value for _, ex in items)
    for stage, n in stages.items():
        print(f"{stage}: {n} examples")
    return EXIT_OK


def _isif_config(settings: dict) -> IsifConfig:
    raw = dict(settings.get("_isif", {}))
    raw["sigma_percent"] = float(settings["sigma"])
    raw["k_retrieval"] = int(settings["k"])
    raw.setdefault("min_tools_per_instance", int(settings["min_tools"]))
    try:
        return IsifConfig.from_mapping(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad ISIF settings: {exc}") from exc


def cmd_isif_step(settings: dict) -> int:
    from .plotting import plot_perplexities

    _require(settings, "store", "dataset")
    if not (settings.get("scorer_cmd") or settings.get("scorer_url")):
        raise UsageError("isif-step needs --scorer-cmd or --scorer-url")
    if not (settings.get("generator_cmd") or settings.get("generator_url")):
        raise UsageError("isif-step needs --generator-cmd or --generator-url")
    store = read_tool_store(settings["store"])
    dataset = read_instances(settings["dataset"])
    config = _isif_config(settings)
    index = _index(settings, store)
    out = _out_dir(settings)
    scorer_ep = open_endpoint(settings.get("scorer_cmd"), settings.get("scorer_url"))
    try:
        generator_ep = open_endpoint(settings.get("generator_cmd"), settings.get("generator_url"))
        try:
            updated, report = isif_step(
                dataset, store, EndpointScorer(scorer_ep), EndpointGenerator(generator_ep),
                config, rng_seed=int(settings["seed"]), index=index,
                original_size=settings.get("original_size"),
            )
        finally:
            generator_ep.close()
    finally:
        scorer_ep.close()
    write_instances(out / "dataset.jsonl", updated)
    _write(out / "update_report.json", report.to_json())
    plot_perplexities(report.perplexities, report.filtered_ids, out / "perplexity.png")
    print(
        f"scored {report.scored_count}, selected {report.filtered_count}, "
        f"generated {report.generated_count}, accepted {report.accepted_count}/{report.budget}"
    )
    for reason, n in sorted(report.rejected.items()):
        print(f"  rejected {reason}: {n}")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolcurriculum", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override it")
    common.add_argument("--store", help="tool store JSONL")
    common.add_argument("--dataset", help="instance dataset JSONL")
    common.add_argument("--out", help="output directory (index file for build-index)")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="retrieval depth (default 10)")
    common.add_argument("--index", help="tool index JSON from build-index")
    common.add_argument("--dim", type=int, help="built-in embedder dimension (default 256)")
    common.add_argument("--embed-cmd", dest="embed_cmd")
    common.add_argument("--embed-url", dest="embed_url")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check dataset instances against the tool store")
    p.add_argument("--min-tools", dest="min_tools", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions on the four aspects")
    p.add_argument("--predictions", help="JSONL of {id, response}")
    p.add_argument("--label", help="row label in the table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("build-index", parents=[common], help="embed tool demonstrations")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", parents=[common], help="top-k candidate tools per query, recall@k")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("assemble", parents=[common], help="write curriculum examples and training plan")
    p.add_argument("--epochs", help="warm-up,in-category,cross-category epochs (default 1,1,1)")
    p.add_argument("--distractors", type=int, help="in-category distractors per instance (default 5)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("isif-step", parents=[common], help="one perplexity-driven self-instruct update")
    p.add_argument("--sigma", type=float, help="percent selected and appended (default 20)")
    p.add_argument("--min-tools", dest="min_tools", type=int)
    p.add_argument("--original-size", dest="original_size", type=int)
    p.add_argument("--scorer-cmd", dest="scorer_cmd")
    p.add_argument("--scorer-url", dest="scorer_url")
    p.add_argument("--generator-cmd", dest="generator_cmd")
    p.add_argument("--generator-url", dest="generator_url")
    p.set_defaults(func=cmd_isif_step)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func = args.func
    del args.verbose, args.command
    try:
        return func(_settings(args))
    except EndpointError as exc:
        print(f"error: endpoint: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (UsageError, OSError, ToolStoreError, DatasetError, CurriculumError, RetrievalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
