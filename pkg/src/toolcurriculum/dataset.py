"""Tool-use instances and their JSONL files."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import IO, Iterable

INSTANCE_KEYS = {"id", "query", "response", "gold_tools"}
OPTIONAL_KEYS = {"category_hint"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    id: str
    query: str
    response: str
    gold_tools: tuple[str, ...]
    category_hint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "gold_tools", tuple(self.gold_tools))

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "query": self.query,
            "response": self.response,
            "gold_tools": list(self.gold_tools),
        }
        if self.category_hint is not None:
            record["category_hint"] = self.category_hint
        return record

    @classmethod
    def from_dict(cls, record: dict, where: str = "") -> "Instance":
        prefix = f"{where}: " if where else ""
        if not isinstance(record, dict):
            raise DatasetError(f"{prefix}expected a JSON object")
        missing = INSTANCE_KEYS - set(record)
        extra = set(record) - INSTANCE_KEYS - OPTIONAL_KEYS
        if missing or extra:
            raise DatasetError(f"{prefix}bad keys (missing={sorted(missing)}, unknown={sorted(extra)})")
        gold = record["gold_tools"]
        if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
            raise DatasetError(f"{prefix}gold_tools must be a list of tool names")
        return cls(
            id=str(record["id"]),
            query=str(record["query"]),
            response=str(record["response"]),
            gold_tools=tuple(gold),
            category_hint=record.get("category_hint"),
        )


def load_instances(source: IO[str] | IO[bytes] | str | bytes) -> list[Instance]:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)
    out: list[Instance] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(source, 1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        inst = Instance.from_dict(record, where=f"line {lineno}")
        if inst.id in seen:
            raise DatasetError(f"line {lineno}: duplicate instance id {inst.id!r}")
        seen.add(inst.id)
        out.append(inst)
    return out


def read_instances(path) -> list[Instance]:
    with open(path, "rb") as fh:
        return load_instances(fh)


def dump_instances(instances: Iterable[Instance]) -> str:
    return "".join(json.dumps(i.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for i in instances)


def write_instances(path, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_instances(instances))
