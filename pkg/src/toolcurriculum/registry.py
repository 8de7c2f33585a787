"""Tool schemas, the closed type vocabulary, and the JSONL tool store."""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

BASE_KINDS = frozenset(
    {"string", "int", "float", "bool", "date", "time", "datetime", "list", "expression", "entity"}
)

# Domain aliases seen in tool demonstrations, each pinned to one base kind.
TYPE_ALIASES: Mapping[str, str] = {
    "user": "string",
    "city": "string",
    "place": "string",
    "doctor": "string",
    "record": "string",
    "medical": "string",
    "disease": "string",
    "path": "entity",
    "ticket": "entity",
    "weather": "entity",
    "item": "entity",
    "paths": "list",
    "money": "float",
    "cost": "float",
    "temperature": "float",
    "humidity": "float",
    "speed": "float",
    "rainfall": "float",
    "value": "float",
    "celsius": "float",
    "fahrenheit": "float",
}

STORE_KEYS = frozenset({"name", "params", "return_type", "category", "demonstration"})


class ToolStoreError(ValueError):
    """Raised when a tool store file or a tool store query is invalid."""


def base_kind(tag: str) -> str:
    """Resolve a type tag (base kind or alias) to its base kind.

    Raises ``ToolStoreError`` for tags outside the closed vocabulary.
    """
    tag = tag.strip().lower()
    if tag in BASE_KINDS:
        return tag
    try:
        return TYPE_ALIASES[tag]
    except KeyError:
        raise ToolStoreError(f"unknown type tag {tag!r}") from None


def is_type_tag(tag: str) -> bool:
    tag = tag.strip().lower()
    return tag in BASE_KINDS or tag in TYPE_ALIASES


@dataclass(frozen=True)
class Param:
    name: str
    type: str

    @property
    def kind(self) -> str:
        return base_kind(self.type)


@dataclass(frozen=True)
class ToolSchema:
    name: str
    params: tuple[Param, ...]
    return_type: str
    category: str
    demonstration: str

    @property
    def return_kind(self) -> str:
        return base_kind(self.return_type)

    @property
    def arity(self) -> int:
        return len(self.params)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": [{"name": p.name, "type": p.type} for p in self.params],
            "return_type": self.return_type,
            "category": self.category,
            "demonstration": self.demonstration,
        }


@dataclass(frozen=True)
class ToolStore:
    """Immutable catalog of tools keyed by name."""

    tools: Mapping[str, ToolSchema]
    categories: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.categories and self.tools:
            object.__setattr__(self, "categories", frozenset(t.category for t in self.tools.values()))
        for tool in self.tools.values():
            if tool.category not in self.categories:
                raise ToolStoreError(f"tool {tool.name} has category {tool.category!r} outside the store")

    def __len__(self) -> int:
        return len(self.tools)

    def __contains__(self, name: str) -> bool:
        return name in self.tools

    def __getitem__(self, name: str) -> ToolSchema:
        return self.tools[name]

    def get(self, name: str) -> ToolSchema | None:
        return self.tools.get(name)

    def names(self) -> list[str]:
        return sorted(self.tools)

    @classmethod
    def from_tools(cls, tools: Iterable[ToolSchema]) -> "ToolStore":
        table: dict[str, ToolSchema] = {}
        for tool in tools:
            if tool.name in table:
                raise ToolStoreError(f"duplicate tool name {tool.name!r}")
            table[tool.name] = tool
        return cls(tools=table, categories=frozenset(t.category for t in table.values()))


def tool_from_dict(record: dict, where: str = "") -> ToolSchema:
    prefix = f"{where}: " if where else ""
    if not isinstance(record, dict):
        raise ToolStoreError(f"{prefix}expected a JSON object")
    keys = set(record)
    if keys != STORE_KEYS:
        missing = sorted(STORE_KEYS - keys)
        extra = sorted(keys - STORE_KEYS)
        raise ToolStoreError(f"{prefix}bad keys (missing={missing}, unknown={extra})")
    name = record["name"]
    if not isinstance(name, str) or not name or not (name[0].isalpha() or name[0] == "_"):
        raise ToolStoreError(f"{prefix}invalid tool name {name!r}")
    if not isinstance(record["params"], list):
        raise ToolStoreError(f"{prefix}params must be an array")
    params = []
    for p in record["params"]:
        if not isinstance(p, dict) or set(p) != {"name", "type"}:
            raise ToolStoreError(f"{prefix}each param needs exactly keys name and type")
        if not is_type_tag(str(p["type"])):
            raise ToolStoreError(f"{prefix}unknown type tag {p['type']!r} for {name}.{p['name']}")
        params.append(Param(str(p["name"]), str(p["type"]).strip().lower()))
    ret = str(record["return_type"])
    if not is_type_tag(ret):
        raise ToolStoreError(f"{prefix}unknown return type tag {ret!r} for {name}")
    for key in ("category", "demonstration"):
        if not isinstance(record[key], str):
            raise ToolStoreError(f"{prefix}{key} must be a string")
    if not record["category"]:
        raise ToolStoreError(f"{prefix}empty category for {name}")
    return ToolSchema(
        name=name,
        params=tuple(params),
        return_type=ret.strip().lower(),
        category=record["category"],
        demonstration=record["demonstration"],
    )


def load_tool_store(source: IO[bytes] | IO[str] | bytes | str) -> ToolStore:
    """Parse a JSONL tool store.

    ``source`` may be a binary or text stream, or raw bytes/str content.
    Errors name the offending line number.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)
    tools: dict[str, ToolSchema] = {}
    for lineno, raw in enumerate(source, 1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ToolStoreError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        tool = tool_from_dict(record, where=f"line {lineno}")
        if tool.name in tools:
            raise ToolStoreError(f"line {lineno}: duplicate tool name {tool.name!r}")
        tools[tool.name] = tool
    return ToolStore(tools=tools, categories=frozenset(t.category for t in tools.values()))


def read_tool_store(path) -> ToolStore:
    with open(path, "rb") as fh:
        return load_tool_store(fh)


def dump_tool_store(store: ToolStore) -> str:
    """Serialize to JSONL, tools sorted by name."""
    return "".join(
        json.dumps(store[name].to_dict(), ensure_ascii=False) + "\n" for name in store.names()
    )


def sample_tools(store: ToolStore, count_min: int, count_max: int, rng_seed: int) -> list[ToolSchema]:
    """Uniform sample without replacement whose size is drawn from [count_min, count_max]."""
    if count_min < 0 or count_min > count_max:
        raise ToolStoreError(f"bad bounds ({count_min}, {count_max})")
    if len(store) < count_min:
        raise ToolStoreError(f"store has {len(store)} tools, fewer than {count_min}")
    rng = random.Random(rng_seed)
    size = rng.randint(count_min, min(count_max, len(store)))
    return [store[n] for n in rng.sample(store.names(), size)]


def tools_in_category(store: ToolStore, category: str, exclude: Iterable[str] = ()) -> list[ToolSchema]:
    if category not in store.categories:
        raise ToolStoreError(f"unknown category {category!r}")
    skip = set(exclude)
    return [
        store[n] for n in store.names() if store[n].category == category and n not in skip
    ]
